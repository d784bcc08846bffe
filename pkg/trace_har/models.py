from sqlalchemy import Column, DateTime, Integer, String, Text, UniqueConstraint
from sqlalchemy.sql import func

from .database import Base


class CachedResponse(Base):
    __tablename__ = "backend_responses"
    __table_args__ = (
        UniqueConstraint("prompt_sha256", "backend", "model", "kind", name="uq_backend_response"),
    )

    id = Column(Integer, primary_key=True, index=True)
    prompt_sha256 = Column(String(64), nullable=False, index=True)
    backend = Column(String(64), nullable=False)
    model = Column(String(255), nullable=False, default="")
    kind = Column(String(32), nullable=False)
    response = Column(Text, nullable=False)
    created_at = Column(DateTime(timezone=True), server_default=func.now())
