"""
FedPass-Lab reset utility: empties the results store, checkpoints and logs.
Usage: python purge.py [--results DIR]
"""
import argparse
import os
import shutil
from pathlib import Path

from loguru import logger
from sqlalchemy import create_engine

from config.settings import SETTINGS
from database.models import Base


def purge_database(results_dir: str = SETTINGS.RESULTS_PATH) -> bool:
    """Drops and recreates the results tables; exported CSV / JSON files go too."""
    db_path = Path(results_dir) / SETTINGS.DB_NAME
    try:
        db_path.parent.mkdir(parents=True, exist_ok=True)
        if db_path.exists():
            logger.info(f"Purging results store: {db_path}...")
        else:
            logger.warning(f"Results store not found at {db_path}. Creating new one.")
        engine = create_engine(f"sqlite:///{db_path}")
        Base.metadata.drop_all(engine)
        Base.metadata.create_all(engine)
        engine.dispose()
        for exported in list(db_path.parent.glob("*.csv")) + list(db_path.parent.glob("*.json")):
            exported.unlink()
        logger.success("Results store purged and schema reset.")
        return True
    except Exception as e:
        logger.error(f"Failed to purge results store: {e}")
        return False


def purge_directory(directory: str, what: str) -> int:
    """Deletes everything inside `directory`; returns the number of entries removed."""
    if not os.path.exists(directory):
        logger.warning(f"{what} directory {directory} not found.")
        return 0
    logger.info(f"Purging {what} in {directory}...")
    removed = 0
    for filename in os.listdir(directory):
        file_path = os.path.join(directory, filename)
        try:
            if os.path.isfile(file_path) or os.path.islink(file_path):
                os.unlink(file_path)
            elif os.path.isdir(file_path):
                shutil.rmtree(file_path)
            removed += 1
        except Exception as e:
            logger.error(f"Failed to delete {file_path}. Reason: {e}")
    logger.success(f"{what} cleared ({removed} entries).")
    return removed


def purge_all(results_dir: str = SETTINGS.RESULTS_PATH):
    purge_database(results_dir)
    purge_directory(SETTINGS.CHECKPOINT_PATH, "Checkpoints")
    purge_directory(SETTINGS.LOG_PATH, "Logs")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Reset results, checkpoints and logs")
    parser.add_argument("--results", default=SETTINGS.RESULTS_PATH)
    purge_all(parser.parse_args().results)
    print("[SUCCESS] FedPass-Lab reset to a clean state.")
