from collections.abc import Generator
from contextlib import contextmanager

from sqlalchemy import Engine, create_engine
from sqlalchemy.orm import Session, sessionmaker

from costmap_racer.config import Settings, get_settings
from costmap_racer.db.models.base import Base


def get_engine(settings: Settings | None = None) -> Engine:
    """Create SQLAlchemy engine based on settings."""
    if settings is None:
        settings = get_settings()

    connect_args = {}
    if settings.DB_URL.startswith("sqlite"):
        connect_args["check_same_thread"] = False

    return create_engine(
        settings.DB_URL,
        echo=settings.SQLALCHEMY_ECHO,
        connect_args=connect_args,
    )


def init_db(engine: Engine) -> None:
    """Create the sweep tables if they do not exist."""
    Base.metadata.create_all(bind=engine)


@contextmanager
def get_session(settings: Settings | None = None) -> Generator[Session, None, None]:
    """Session on the configured store, with tables created on first use."""
    engine = get_engine(settings)
    init_db(engine)
    session_factory = sessionmaker(autocommit=False, autoflush=False, bind=engine)
    try:
        with session_factory() as session:
            yield session
    finally:
        engine.dispose()
