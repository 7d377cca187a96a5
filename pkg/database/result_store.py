import json
from pathlib import Path
from typing import Iterable, List

import pandas as pd
from loguru import logger

from database.models import RunRecord, init_db


def _builtin(o):
    return o.tolist() if hasattr(o, "tolist") else str(o)


def _plain(value):
    """numpy scalars and arrays to JSON builtins."""
    return json.loads(json.dumps(value, default=_builtin))


CSV_COLUMNS = ["defense", "strength", "attack", "seed", "main_accuracy", "recovery_error", "train_s", "attack_s"]
KEY_COLUMNS = ["defense", "strength", "attack", "seed"]


class ResultStore:
    """
    SQLite-backed results table; the only writer of a sweep's CSV / JSON exports.
    """

    def __init__(self, db_path: str):
        self.db_path = db_path
        self.session_factory = init_db(db_path)

    def upsert(self, results: Iterable) -> int:
        """Inserts or overwrites rows keyed by (defense, strength, attack, seed)."""
        session = self.session_factory()
        count = 0
        try:
            for r in results:
                record = session.query(RunRecord).filter_by(
                    defense=r.defense, strength=r.strength, attack=r.attack, seed=r.seed).one_or_none()
                if record is None:
                    record = RunRecord(defense=r.defense, strength=r.strength, attack=r.attack, seed=r.seed)
                    session.add(record)
                record.main_accuracy = r.main_accuracy
                record.recovery_error = r.recovery_error
                record.train_s = r.train_s
                record.attack_s = r.attack_s
                record.error = r.error
                record.defense_spec = _plain(r.defense_spec)
                record.diagnostics = _plain(r.diagnostics)
                count += 1
            session.commit()
        except Exception as e:
            session.rollback()
            logger.error(f"[Results] upsert failed: {e}")
            raise
        finally:
            session.close()
        return count

    def frame(self) -> pd.DataFrame:
        session = self.session_factory()
        try:
            rows = [{
                "defense": r.defense, "strength": r.strength, "attack": r.attack, "seed": r.seed,
                "main_accuracy": r.main_accuracy, "recovery_error": r.recovery_error,
                "train_s": r.train_s, "attack_s": r.attack_s, "error": r.error,
                "defense_spec": r.defense_spec, "diagnostics": r.diagnostics,
            } for r in session.query(RunRecord).all()]
        finally:
            session.close()
        df = pd.DataFrame(rows, columns=CSV_COLUMNS + ["error", "defense_spec", "diagnostics"])
        return df.sort_values(KEY_COLUMNS, kind="mergesort").reset_index(drop=True)

    def export(self, out_dir: str, name: str = "results") -> List[Path]:
        """Writes `<name>.csv` (normative columns) and `<name>.json` (full rows incl. errors)."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        df = self.frame()
        csv_path, json_path = out / f"{name}.csv", out / f"{name}.json"
        df[CSV_COLUMNS].to_csv(csv_path, index=False)
        json_path.write_text(json.dumps(df.astype(object).where(df.notna(), None).to_dict(orient="records"), indent=2,
                                        default=_builtin))
        logger.info(f"[Results] exported {len(df)} rows to {csv_path} and {json_path}")
        return [csv_path, json_path]
