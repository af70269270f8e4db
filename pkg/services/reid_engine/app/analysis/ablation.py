"""
RTRL DESK - Ablation runner
Trains and evaluates named model variants over several seeds under the
half-split protocol, one fresh model per trial.
"""

from pathlib import Path
from typing import List, Optional, Sequence

import pandas as pd
from loguru import logger

from app.analysis.protocols import run_protocol, summarize
from app.core.config import RunConfig
from app.models.schemas import AblationRow
from app.models.two_stream import TwoStreamReID, variant_overrides
from app.services.dataset import DatasetIndex, load_dataset
from app.train import train_model

ABLATION_RANKS = [1, 5, 20]
CSV_COLUMNS = {"rank1": "Rank-1", "rank5": "Rank-5", "rank20": "Rank-20", "mean_ap": "mAP"}


def variant_slug(variant: str) -> str:
    return variant.replace("+", "-")


def variant_config(config: RunConfig, variant: str, seed: int) -> RunConfig:
    out_dir = Path(config.run.output_dir) / "ablation" / variant_slug(variant) / f"seed{seed}"
    return config.with_overrides({
        **variant_overrides(variant),
        "run.seed": seed,
        "run.output_dir": str(out_dir),
        "eval.protocol": "half10",
        "eval.ranks": ABLATION_RANKS,
        "eval.streams": ["fused"],
    })


def evaluate_variant(config: RunConfig, dataset: DatasetIndex, variant: str, seed: int) -> AblationRow:
    cfg = variant_config(config, variant, seed)

    def train_fn(train_ids: List[int], trial: int) -> TwoStreamReID:
        trial_cfg = cfg.with_overrides({"run.output_dir": str(Path(cfg.run.output_dir) / f"trial{trial:02d}")})
        return train_model(trial_cfg, dataset, train_ids).model

    reports = run_protocol(dataset, None, "half10", seed, cfg.eval, train_fn=train_fn)
    values = summarize(reports)[0].as_row()
    row = AblationRow(
        variant=variant,
        seed=seed,
        rank1=values["Rank-1"],
        rank5=values["Rank-5"],
        rank20=values["Rank-20"],
        mean_ap=values["mAP"],
    )
    logger.info(f"📊 {variant} seed {seed}: Rank-1 {row.rank1 * 100:.2f}  mAP {row.mean_ap * 100:.2f}")
    return row


def run_ablation(
    config: RunConfig,
    variants: Sequence[str],
    seeds: Sequence[int],
    dataset: Optional[DatasetIndex] = None,
) -> pd.DataFrame:
    """One row per (variant, seed), written to <output_dir>/ablation.csv"""
    for variant in variants:
        variant_overrides(variant)
    if dataset is None:
        dataset = load_dataset(config.data.root, config.data.min_length)
    logger.info(f"🚀 Ablation: {len(variants)} variants × {len(seeds)} seeds")

    rows = [evaluate_variant(config, dataset, variant, seed).model_dump() for variant in variants for seed in seeds]
    table = pd.DataFrame(rows).rename(columns=CSV_COLUMNS)
    path = Path(config.run.output_dir) / "ablation.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False)

    means = table.groupby("variant", sort=False)[list(CSV_COLUMNS.values())].mean()
    for variant, values in means.iterrows():
        logger.info(f"📊 {variant:<28} mean Rank-1 {values['Rank-1'] * 100:6.2f}  mAP {values['mAP'] * 100:6.2f}")
    logger.success(f"✅ Ablation table written to {path}")
    return table
