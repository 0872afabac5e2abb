"""
End-to-end example: generate a tiny corpus, train a small run and refine the test split.

Runs on CPU in a few minutes. Everything is written to a temporary directory.
"""

import logging
import tempfile
from pathlib import Path

from umbd import RefinementPipeline, load_dataset, write_dataset
from umbd.models import (
    DatasetManifest,
    DenoiserConfig,
    HUQNetConfig,
    InferenceConfig,
    RunConfig,
    TrainConfig,
    UncertaintySource,
)
from umbd.reporting import plot_metric_deltas, eval_rows, read_csv, write_csv, EVAL_FIELDS

logging.basicConfig(level=logging.INFO, format="%(levelname)s: %(message)s")


def main():
    root = Path(tempfile.mkdtemp(prefix="umbd_"))
    data = write_dataset(DatasetManifest(seed=0, train_count=64, test_count=16, image_size=32), root / "data")

    config = RunConfig(
        train=TrainConfig(T_train=100, batch_size=8, huqnet_epochs=3, denoiser_max_epochs=5,
                          finetune_max_epochs=2, patience=2),
        inference=InferenceConfig(T_infer=5),
        denoiser=DenoiserConfig(base_channels=16, adapted_channels=16),
        huqnet=HUQNetConfig(backbone_channels=(16, 16, 32, 32), mc_samples=4),
        data_dir=str(data),
    )
    pipeline = RefinementPipeline(config, run_dir=root / "run")

    train, test = load_dataset(data, "train"), load_dataset(data, "test")
    pipeline.fit(train, extra=test)

    # Refine one image and look at where the refiner was allowed to act
    record = pipeline.refine(test[0].image_tensor(), inference=config.inference.replace(trace=True))
    print(f"{record.sample_id}: {float((record.uncertainty > 0.5).float().mean()):.1%} of pixels uncertain, "
          f"{len(record.trace)} latents traced")

    # Compare uncertainty sources on the test split
    for source in UncertaintySource:
        coarse, refined, _ = pipeline.evaluate_corpus(test, config.inference.replace(uncertainty_source=source))
        print(f"{source.value:8s} MAE {coarse.mae:.4f} -> {refined.mae:.4f}   S {coarse.s_alpha:.4f} -> {refined.s_alpha:.4f}")

    coarse, refined, _ = pipeline.evaluate_corpus(test, seeds=3)
    table = write_csv(pipeline.layout.eval, EVAL_FIELDS, eval_rows("oracle", config.inference.T_infer, coarse, refined))
    figure = plot_metric_deltas(read_csv(table), pipeline.layout.figures / "metric_deltas.png")
    print(f"Results in {pipeline.layout.root} (figure: {figure})")


if __name__ == "__main__":
    main()
