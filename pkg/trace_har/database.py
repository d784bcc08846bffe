import logging
from pathlib import Path
from typing import Tuple, Union

from sqlalchemy import create_engine, event, text
from sqlalchemy.engine import Engine
from sqlalchemy.orm import declarative_base, sessionmaker

logger = logging.getLogger(__name__)

CACHE_FILENAME = "cache.sqlite"

# Base class for models
Base = declarative_base()


def make_engine(db_path: Union[str, Path]) -> Engine:
    """SQLite engine for the backend response cache, shareable across threads"""
    engine = create_engine(
        f"sqlite:///{db_path}",
        echo=False,
        connect_args={"check_same_thread": False, "timeout": 30},
    )

    @event.listens_for(engine, "connect")
    def set_sqlite_pragma(dbapi_connection, connection_record):
        """Set connection parameters"""
        cursor = dbapi_connection.cursor()
        cursor.execute("PRAGMA journal_mode=WAL")
        cursor.close()
        logger.debug("New cache connection established")

    return engine


def init_database(db_path: Union[str, Path]) -> Tuple[Engine, sessionmaker]:
    """Create the cache tables if needed and return (engine, session factory)"""
    from . import models  # noqa: F401  registers the tables on Base

    Path(db_path).parent.mkdir(parents=True, exist_ok=True)
    engine = make_engine(db_path)
    Base.metadata.create_all(bind=engine)
    session_factory = sessionmaker(autocommit=False, autoflush=False, bind=engine)
    logger.info(f"Response cache ready at {db_path}")
    return engine, session_factory


def test_database_connection(engine: Engine) -> Tuple[bool, str]:
    """Test database connection and return status"""
    try:
        with engine.connect() as conn:
            conn.execute(text("SELECT 1"))
        return True, "Database connection successful"
    except Exception as e:
        logger.error(f"Database connection test failed: {e}")
        return False, str(e)
