from sqlalchemy import Column, Integer, String, Float, DateTime, JSON, UniqueConstraint, create_engine
from sqlalchemy.orm import declarative_base, sessionmaker
from datetime import datetime
from pathlib import Path

Base = declarative_base()

class RunRecord(Base):
    """One (defense setting, attack, seed) outcome. Reruns overwrite the row."""
    __tablename__ = 'run_results'
    __table_args__ = (UniqueConstraint('defense', 'strength', 'attack', 'seed', name='uq_run_key'),)

    id = Column(Integer, primary_key=True)
    defense = Column(String, nullable=False)     # e.g. "fedpass:N", "gaussian_noise:embeddings"
    strength = Column(Float, nullable=False)
    attack = Column(String, nullable=False)      # cafe, mi, pmc
    seed = Column(Integer, nullable=False)
    main_accuracy = Column(Float)
    recovery_error = Column(Float)
    train_s = Column(Float)
    attack_s = Column(Float)
    error = Column(String)                       # set on failed grid points
    defense_spec = Column(JSON)
    diagnostics = Column(JSON)
    updated_at = Column(DateTime, default=datetime.utcnow, onupdate=datetime.utcnow)

# Database initialization helper
def init_db(db_path: str):
    Path(db_path).parent.mkdir(parents=True, exist_ok=True)
    engine = create_engine(f"sqlite:///{db_path}")
    Base.metadata.create_all(engine)
    return sessionmaker(bind=engine)
