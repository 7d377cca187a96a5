from typing import Iterable, Union

import numpy as np
import pandas as pd
from loguru import logger

from core.errors import ConfigError
from core.metrics import CapInput, cap

CAP_COLUMNS = ["defense", "attack", "cap", "cap_mean", "cap_std", "strengths", "seeds"]


def _frame(results: Union[pd.DataFrame, Iterable]) -> pd.DataFrame:
    if isinstance(results, pd.DataFrame):
        return results.copy()
    rows = [{
        "defense": r.defense, "strength": r.strength, "attack": r.attack, "seed": r.seed,
        "main_accuracy": r.main_accuracy, "recovery_error": r.recovery_error,
    } for r in results]
    return pd.DataFrame(rows, columns=["defense", "strength", "attack", "seed", "main_accuracy", "recovery_error"])


class TradeOffAnalyzer:
    """
    Privacy / utility trade-off aggregation over sweep rows.
    """

    @staticmethod
    def cap_table(results: Union[pd.DataFrame, Iterable]) -> pd.DataFrame:
        """
        One row per (defense, attack):
          cap       CAP of the seed-averaged (accuracy, error) pair of every strength
          cap_mean  mean over seeds of the per-seed CAP
          cap_std   population std over seeds of the per-seed CAP
        Failed rows (missing accuracy or error) are ignored; a cell left with no usable
        rows is omitted with a warning.
        """
        df = _frame(results)
        missing = {"defense", "strength", "attack", "seed", "main_accuracy", "recovery_error"} - set(df.columns)
        if missing:
            raise ConfigError(f"result rows lack columns {sorted(missing)}")
        out = []
        for (defense, attack), group in df.groupby(["defense", "attack"], sort=True):
            usable = group.dropna(subset=["main_accuracy", "recovery_error"])
            if usable.empty:
                logger.warning(f"[CAP] no usable rows for ({defense}, {attack}); cell omitted")
                continue
            per_strength = usable.groupby("strength", sort=True)[["main_accuracy", "recovery_error"]].mean()
            pooled = cap(CapInput.of(per_strength.itertuples(index=False, name=None)))
            per_seed = [
                cap(CapInput.of(rows.sort_values("strength")[["main_accuracy", "recovery_error"]].itertuples(
                    index=False, name=None)))
                for _, rows in usable.groupby("seed", sort=True)
            ]
            out.append({
                "defense": defense, "attack": attack, "cap": pooled,
                "cap_mean": float(np.mean(per_seed)), "cap_std": float(np.std(per_seed)),
                "strengths": len(per_strength), "seeds": len(per_seed),
            })
        table = pd.DataFrame(out, columns=CAP_COLUMNS)
        logger.info(f"[CAP] {len(table)} (defense, attack) cells from {len(df)} rows")
        return table


def cap_table(results: Union[pd.DataFrame, Iterable]) -> pd.DataFrame:
    return TradeOffAnalyzer.cap_table(results)
