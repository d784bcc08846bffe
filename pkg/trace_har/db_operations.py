#!/usr/bin/env python3
"""
Response cache operations: backend replies keyed by prompt SHA-256
"""
import logging
import threading
from pathlib import Path
from typing import Optional, Union

from sqlalchemy.exc import IntegrityError, SQLAlchemyError
from sqlalchemy.orm import Session

from .database import init_database
from .models import CachedResponse

logger = logging.getLogger(__name__)


class CacheOperations:
    """Operations on the backend_responses table"""

    @staticmethod
    def get_response(db: Session, prompt_sha256: str, backend: str, model: str, kind: str) -> Optional[str]:
        row = (
            db.query(CachedResponse)
            .filter(
                CachedResponse.prompt_sha256 == prompt_sha256,
                CachedResponse.backend == backend,
                CachedResponse.model == model,
                CachedResponse.kind == kind,
            )
            .first()
        )
        return row.response if row is not None else None

    @staticmethod
    def store_response(db: Session, prompt_sha256: str, backend: str, model: str, kind: str, response: str) -> bool:
        """Insert a response; False when the key is already cached"""
        db.add(CachedResponse(
            prompt_sha256=prompt_sha256,
            backend=backend,
            model=model,
            kind=kind,
            response=response,
        ))
        try:
            db.commit()
            return True
        except IntegrityError:
            db.rollback()
            return False

    @staticmethod
    def count(db: Session) -> int:
        return db.query(CachedResponse).count()


class ResponseCache:
    """Thread-safe wrapper around the SQLite cache file"""

    def __init__(self, db_path: Union[str, Path]):
        self.db_path = Path(db_path)
        self.engine, self.session_factory = init_database(self.db_path)
        self._lock = threading.Lock()

    def get(self, prompt_sha256: str, backend: str, model: str, kind: str) -> Optional[str]:
        with self._lock:
            db = self.session_factory()
            try:
                return CacheOperations.get_response(db, prompt_sha256, backend, model, kind)
            except SQLAlchemyError as e:
                logger.warning(f"Cache lookup failed, treating as miss: {e}")
                return None
            finally:
                db.close()

    def put(self, prompt_sha256: str, backend: str, model: str, kind: str, response: str) -> None:
        with self._lock:
            db = self.session_factory()
            try:
                CacheOperations.store_response(db, prompt_sha256, backend, model, kind, response)
            except SQLAlchemyError as e:
                db.rollback()
                logger.warning(f"Cache write failed: {e}")
            finally:
                db.close()

    def size(self) -> int:
        with self._lock:
            db = self.session_factory()
            try:
                return CacheOperations.count(db)
            finally:
                db.close()

    def close(self) -> None:
        self.engine.dispose()
