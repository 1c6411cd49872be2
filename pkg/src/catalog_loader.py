import pandas as pd
from pathlib import Path
from typing import List

from .models import ApplianceCatalog, ApplianceEntry, ApplianceProfile

BASE_DIR = Path(__file__).resolve().parent.parent / "data"


def _read_csv(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, dtype=str).fillna("")


def load_catalog(path: Path | None = None) -> ApplianceCatalog:
    """
    Build the appliance catalog from a one-row-per-level table:

        appliance_id,display_name,level,active_power,reactive_power
        fan,Fan,1,25,10
        fan,Fan,2,35,14
    """
    df = _read_csv(path or BASE_DIR / "appliances.csv")
    df["level"] = df["level"].astype(int)
    entries = []
    # keep first-seen appliance order; it fixes the target order downstream
    for appliance_id in dict.fromkeys(df["appliance_id"].str.strip()):
        rows = df[df["appliance_id"].str.strip() == appliance_id].sort_values("level")
        entries.append(
            ApplianceEntry(
                appliance_id=appliance_id,
                display_name=rows["display_name"].iloc[0].strip() or appliance_id,
                level_count=len(rows),
                active_power=[float(v) for v in rows["active_power"]],
                reactive_power=[float(v or 0) for v in rows["reactive_power"]],
            )
        )
    return ApplianceCatalog(entries=entries)


def load_profiles(path: Path | None = None) -> List[ApplianceProfile]:
    df = _read_csv(path or BASE_DIR / "profiles.csv")
    return [
        ApplianceProfile(
            appliance_id=row["appliance_id"].strip(),
            mean_on_s=float(row["mean_on_s"]),
            mean_off_s=float(row["mean_off_s"]),
            sigma=float(row["sigma"] or 0),
        )
        for _, row in df.iterrows()
    ]
