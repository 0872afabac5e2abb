"""
Training and inference orchestration.

RefinementPipeline owns the frozen prior, HUQNet and the denoiser of one run.
It trains them in the fixed stage order (prior, HUQNet pre-training, denoiser,
HUQNet fine-tuning), refines coarse masks, evaluates corpora and writes
checkpoints, loss logs and tables into the run directory.
"""

import copy
import logging
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import (
    DENOISER_FORMAT,
    HUQNET_FORMAT,
    PRIOR_FORMAT,
    load_checkpoint,
    parameter_checksum,
    restore_state,
    save_checkpoint,
)
from .config import RunLayout, load_environment, load_run_config, save_run_config
from .datagen import load_dataset, load_manifest
from .denoiser import Denoiser, conditioning_map
from .diffusion import (
    NoiseSchedule,
    bernoulli_posterior,
    compose_refined_mask,
    make_cosine_schedule,
    mask_residual,
    predict_start_from_noise,
    run_reverse_chain,
    sample_forward,
    schedule_from_metadata,
    select_ddim_subsequence,
)
from .exceptions import CheckpointError, ConfigurationError, DatasetError, FreezeViolationError, NumericalError
from .huqnet import HUQNet, entropy_map
from .losses import diffusion_loss, huqnet_loss, weight_map
from .metrics import MetricAccumulator, corpus_metrics, evaluate_pair, mae
from .models import (
    CorruptionSpec,
    DatasetSample,
    DenoiserConfig,
    HUQNetConfig,
    InferenceConfig,
    LossReport,
    MetricRow,
    PriorKind,
    RefinementRecord,
    RunConfig,
    UncertaintySource,
)
from .reporting import LossLog
from .segmenters import (
    CorruptedOracleSegmenter,
    PriorSegmenter,
    ToyCNN,
    ToyCNNSegmenter,
    build_prior,
    freeze,
    uncertainty_gt,
    unfreeze,
)
from .seeding import derive_generator

logger = logging.getLogger(__name__)

STAGES = ("1", "2", "3")
# BatchNorm layers in training mode need more than one value per channel
TRAIN_MIN_BATCH = 2
ABLATION_SOURCES = ("coarse", UncertaintySource.ONES, UncertaintySource.ENTROPY, UncertaintySource.HUQNET)


def split_validation(samples: List[DatasetSample], fraction: float) -> Tuple[List[DatasetSample], List[DatasetSample]]:
    """The last `fraction` of the training split (at least one sample) becomes validation."""
    if len(samples) < 2:
        return list(samples), list(samples)
    count = min(max(1, int(round(len(samples) * fraction))), len(samples) - 1)
    return list(samples[:-count]), list(samples[-count:])


def stack_samples(samples: Sequence[DatasetSample], device) -> Tuple[torch.Tensor, torch.Tensor]:
    x = torch.stack([s.image_tensor() for s in samples]).to(device)
    m = torch.stack([s.mask_tensor() for s in samples]).to(device)
    return x, m


def iter_batches(
    samples: Sequence[DatasetSample], batch_size: int, generator: Optional[torch.Generator] = None, min_batch: int = 1,
) -> Iterator[List[DatasetSample]]:
    """Shuffled when a generator is given, in order otherwise. A trailing batch below min_batch is dropped."""
    order = torch.randperm(len(samples), generator=generator).tolist() if generator is not None else range(len(samples))
    order = list(order)
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        if len(chunk) < min_batch:
            break
        yield [samples[i] for i in chunk]


class EarlyStopping:
    """Tracks the best validation score (lower is better) and the epochs since it improved."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = -1
        self.stale = 0
        self.best_state: Optional[Dict[str, torch.Tensor]] = None

    def update(self, score: float, epoch: int, module: nn.Module) -> bool:
        if score < self.best:
            self.best, self.best_epoch, self.stale = score, epoch, 0
            self.best_state = copy.deepcopy(module.state_dict())
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience

    def restore(self, module: nn.Module) -> None:
        if self.best_state is not None:
            module.load_state_dict(self.best_state)


@contextmanager
def frozen_guard(**modules: Optional[nn.Module]):
    """
    Assert that none of the given modules change inside the block.

    Raises:
        FreezeViolationError: If a checksum differs on exit
    """
    before = {name: parameter_checksum(m) for name, m in modules.items() if m is not None}
    yield
    for name, checksum in before.items():
        if parameter_checksum(modules[name]) != checksum:
            logger.error(f"Frozen network '{name}' changed during training")
            raise FreezeViolationError(f"Frozen network '{name}' changed during training")


def poly_scheduler(optimizer: torch.optim.Optimizer, total_steps: int, power: float):
    return torch.optim.lr_scheduler.PolynomialLR(optimizer, total_iters=max(1, total_steps), power=power)


class RefinementPipeline:
    """
    Prior, uncertainty estimator and denoiser of one refinement run.

    Args:
        config: Resolved run configuration; loaded from the environment when omitted
        run_dir: Run directory for checkpoints and logs (nothing is written when omitted)
        dotenv_path: Optional .env file
    """

    def __init__(
        self,
        config: Optional[RunConfig] = None,
        run_dir: Optional[Union[str, Path]] = None,
        dotenv_path: Optional[str] = None,
    ):
        load_environment(dotenv_path)
        self.config = config or load_run_config(dotenv_path=dotenv_path)
        self.device = torch.device(self.config.device)
        self.layout = RunLayout.at(run_dir).create() if run_dir is not None else None
        self.schedule: NoiseSchedule = make_cosine_schedule(self.config.train.T_train)
        self.prior: Optional[PriorSegmenter] = None
        self.huqnet: Optional[HUQNet] = None
        self.denoiser: Optional[Denoiser] = None
        self.corruption = CorruptionSpec()
        self.loss_log = LossLog(self.layout.logs) if self.layout else None
        self._nan_dumps = 0

        if self.layout is not None:
            save_run_config(self.config, self.layout.config)
        logger.info(f"Pipeline ready on {self.device} (T_train={self.schedule.T_train})")

    # Components

    def _require(self, name: str):
        component = getattr(self, name)
        if component is None:
            logger.error(f"The {name} has not been trained or loaded")
            raise ConfigurationError(f"The {name} has not been trained or loaded")
        return component

    def _generator(self, purpose: str, index: int = 0, seed: Optional[int] = None) -> torch.Generator:
        root = self.config.train.seed if seed is None else seed
        return derive_generator(root, purpose, index, device=self.device)

    def _log(self, stage: str, epoch: int, components: Dict[str, float]) -> None:
        if self.loss_log is not None:
            self.loss_log.append(stage, epoch, components)

    def _check_finite(self, report: LossReport, stage: str, step: int, **state) -> None:
        """
        Raises:
            NumericalError: If the loss is NaN or infinite; the batch is dumped first
        """
        if report.is_finite():
            return
        self._nan_dumps += 1
        if self.layout is not None:
            path = self.layout.diagnostics / f"nan_step_{self._nan_dumps}.pt"
            path.parent.mkdir(parents=True, exist_ok=True)
            torch.save({
                "step": step,
                "stage": stage,
                "components": report.components,
                "batch": {k: v.detach().cpu() if isinstance(v, torch.Tensor) else v for k, v in state.items()},
            }, path)
            logger.error(f"Non-finite {stage} loss at step {step}; state dumped to {path}")
        else:
            logger.error(f"Non-finite {stage} loss at step {step}: {report.components}")
        raise NumericalError(f"Non-finite loss in stage {stage} at step {step}")

    def _optimize(self, optimizer: torch.optim.Optimizer, report: LossReport, stage: str, step: int) -> None:
        """
        Raises:
            NumericalError: If the backward pass fails (e.g. the loss has no gradient path)
        """
        optimizer.zero_grad()
        try:
            report.total.backward()
        except RuntimeError as e:
            logger.error(f"Backward pass failed in stage {stage} at step {step}: {e}")
            raise NumericalError(f"Backward pass failed in stage {stage} at step {step}: {e}") from e
        optimizer.step()

    def new_denoiser(self) -> Denoiser:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.config.train.seed)
            return Denoiser(self.config.denoiser, self.schedule.T_train).to(self.device)

    def new_huqnet(self) -> HUQNet:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.config.train.seed + 1)
            return HUQNet(self.config.huqnet).to(self.device)

    # Stage 0: prior

    def train_prior(
        self, train: List[DatasetSample], extra: Sequence[DatasetSample] = (), corruption: Optional[CorruptionSpec] = None
    ) -> PriorSegmenter:
        """Build the configured prior (train the toy CNN, or register the oracle's images) and freeze it."""
        self.corruption = corruption or self.corruption
        self.prior = build_prior(self.config.prior, train, self.corruption, extra, device=str(self.device))
        logger.info(f"Prior '{self.prior.kind.value}' ready, checksum {self.prior.checksum()[:12]}")
        if self.layout is not None:
            self.save_prior()
        return self.prior

    # Stage 1

    def _huqnet_batch_loss(self, batch: List[DatasetSample], generator: torch.Generator) -> Tuple[LossReport, Dict]:
        x, M_GT = stack_samples(batch, self.device)
        Mc, _ = self.prior.segment(x)
        U_GT = uncertainty_gt(Mc, M_GT)
        bundle = self.huqnet(x, Mc, generator)
        report = huqnet_loss(bundle.u_hat, U_GT, bundle.c_logit, M_GT if bundle.c_logit is not None else None,
                             bundle.mu, bundle.sigma, self.config.train.eta)
        return report, {"x": x, "M_GT": M_GT, "Mc": Mc}

    def train_stage1_huqnet(self, train: List[DatasetSample]) -> HUQNet:
        """
        Pre-train HUQNet against U_GT = |f(x) - M_GT| with the prior frozen.

        Returns:
            HUQNet: The trained network
        """
        prior = self._require("prior")
        cfg = self.config.train
        self.huqnet = unfreeze(self.huqnet or self.new_huqnet())
        optimizer = torch.optim.AdamW(self.huqnet.parameter_groups(cfg), weight_decay=cfg.weight_decay)
        batches_per_epoch = -(-len(train) // cfg.batch_size)
        scheduler = poly_scheduler(optimizer, cfg.huqnet_epochs * batches_per_epoch, cfg.poly_power)
        shuffle = torch.Generator().manual_seed(cfg.seed)
        mc = self._generator("huqnet_training")

        with frozen_guard(prior=prior.network, denoiser=self.denoiser):
            step = 0
            for epoch in range(cfg.huqnet_epochs):
                self.huqnet.train()
                totals = []
                for batch in iter_batches(train, cfg.batch_size, shuffle, min_batch=TRAIN_MIN_BATCH):
                    report, state = self._huqnet_batch_loss(batch, mc)
                    step += 1
                    self._check_finite(report, "1", step, **state)
                    self._optimize(optimizer, report, "1", step)
                    scheduler.step()
                    totals.append(report.as_row()["total"])
                    self._log("1", epoch, report.as_row())
                logger.info(f"Stage 1 epoch {epoch + 1}/{cfg.huqnet_epochs}: loss={np.mean(totals):.4f}")
        self.huqnet.eval()
        if self.layout is not None:
            self.save_huqnet()
        return self.huqnet

    # Stage 2

    def train_step_denoiser(
        self,
        x: torch.Tensor,
        M_GT: torch.Tensor,
        generator: torch.Generator,
        optimizer: Optional[torch.optim.Optimizer] = None,
        step: int = 0,
    ) -> LossReport:
        """
        One training step of the denoiser with U = U_GT.

        Samples t uniformly in 1..T, noises y0 = U_GT * M_GT towards
        U_GT * M_c, predicts the noise and scores the predicted posterior and
        the reconstructed refined mask. The gradient step is taken only when
        an optimizer is given.
        """
        denoiser = self._require("denoiser")
        prior = self._require("prior")
        train = self.config.train
        Mc, features = prior.segment(x)
        U = uncertainty_gt(Mc, M_GT)
        y0 = mask_residual(U, M_GT)
        Mc_tilde = mask_residual(U, Mc)

        t = torch.randint(1, self.schedule.T_train + 1, (x.shape[0],), generator=generator, device=self.device)
        _, y_t = sample_forward(self.schedule, t, y0, Mc_tilde, generator)
        eps_hat = denoiser(x, conditioning_map(denoiser.config, Mc, U), y_t, t, features)
        y0_hat = predict_start_from_noise(y_t, eps_hat)
        M_r_hat = compose_refined_mask(y0_hat, U, Mc)

        q_post = bernoulli_posterior(self.schedule, t, y_t, y0, Mc_tilde)
        p_post = bernoulli_posterior(self.schedule, t, y_t, y0_hat, Mc_tilde)
        report = diffusion_loss(q_post, p_post, M_r_hat, M_GT, weight_map(M_GT, train.weight_kernel, train.weight_factor))
        self._check_finite(report, "2", step, x=x, M_GT=M_GT, t=t, y_t=y_t, eps_hat=eps_hat)

        if optimizer is not None:
            self._optimize(optimizer, report, "2", step)
        return report

    def validation_mae(self, samples: List[DatasetSample]) -> float:
        """Refined MAE with HUQNet uncertainty and the short validation chain."""
        icfg = self.config.inference.replace(T_infer=min(self.config.train.val_steps, self.schedule.T_train),
                                             uncertainty_source=UncertaintySource.HUQNET, seed=self.config.train.seed)
        scores = []
        for index, batch in enumerate(iter_batches(samples, self.config.train.batch_size)):
            x, M_GT = stack_samples(batch, self.device)
            records = self.refine_batch(x, inference=icfg, generator=self._generator("validation", index))
            scores.extend(mae(r.refined.cpu().numpy(), m.cpu().numpy()) for r, m in zip(records, M_GT))
        return float(np.mean(scores))

    def train_stage2_denoiser(self, train: List[DatasetSample], val: List[DatasetSample]) -> Denoiser:
        """
        Train the denoiser with the prior and HUQNet frozen, stopping early on validation refined MAE.
        """
        prior = self._require("prior")
        huqnet = self._require("huqnet")
        freeze(huqnet)
        cfg = self.config.train
        self.denoiser = unfreeze(self.denoiser or self.new_denoiser())
        optimizer = torch.optim.AdamW(self.denoiser.parameters(), lr=cfg.lr_denoiser, weight_decay=cfg.weight_decay)
        batches_per_epoch = -(-len(train) // cfg.batch_size)
        scheduler = poly_scheduler(optimizer, cfg.denoiser_max_epochs * batches_per_epoch, cfg.poly_power)
        shuffle = torch.Generator().manual_seed(cfg.seed + 2)
        noise = self._generator("denoiser_training")
        stopper = EarlyStopping(cfg.patience)

        with frozen_guard(prior=prior.network, huqnet=huqnet):
            step = 0
            for epoch in range(cfg.denoiser_max_epochs):
                self.denoiser.train()
                totals = []
                for batch in iter_batches(train, cfg.batch_size, shuffle, min_batch=TRAIN_MIN_BATCH):
                    x, M_GT = stack_samples(batch, self.device)
                    step += 1
                    report = self.train_step_denoiser(x, M_GT, noise, optimizer, step)
                    scheduler.step()
                    totals.append(report.as_row()["total"])
                    self._log("2", epoch, report.as_row())
                self.denoiser.eval()
                val_mae = self.validation_mae(val)
                self._log("2", epoch, {"total": float(np.mean(totals)), "val_mae": val_mae})
                improved = stopper.update(val_mae, epoch, self.denoiser)
                logger.info(f"Stage 2 epoch {epoch + 1}/{cfg.denoiser_max_epochs}: "
                            f"loss={np.mean(totals):.4f} val_mae={val_mae:.4f}{' *' if improved else ''}")
                if stopper.should_stop:
                    logger.info(f"Stage 2 stopped early after {epoch + 1} epochs (best epoch {stopper.best_epoch + 1})")
                    break
        stopper.restore(self.denoiser)
        self.denoiser.eval()
        if self.layout is not None:
            self.save_denoiser()
        return self.denoiser

    # Stage 3

    def train_stage3_finetune_huqnet(self, train: List[DatasetSample], val: List[DatasetSample]) -> HUQNet:
        """Fine-tune HUQNet with the denoiser frozen, stopping early on validation refined MAE."""
        prior = self._require("prior")
        denoiser = freeze(self._require("denoiser"))
        huqnet = unfreeze(self._require("huqnet"))
        cfg = self.config.train
        optimizer = torch.optim.AdamW(huqnet.parameter_groups(cfg), weight_decay=cfg.weight_decay)
        batches_per_epoch = -(-len(train) // cfg.batch_size)
        scheduler = poly_scheduler(optimizer, cfg.finetune_max_epochs * batches_per_epoch, cfg.poly_power)
        shuffle = torch.Generator().manual_seed(cfg.seed + 3)
        mc = self._generator("finetune_training")
        stopper = EarlyStopping(cfg.patience)

        with frozen_guard(prior=prior.network, denoiser=denoiser):
            step = 0
            for epoch in range(cfg.finetune_max_epochs):
                huqnet.train()
                totals = []
                for batch in iter_batches(train, cfg.batch_size, shuffle, min_batch=TRAIN_MIN_BATCH):
                    report, state = self._huqnet_batch_loss(batch, mc)
                    step += 1
                    self._check_finite(report, "3", step, **state)
                    self._optimize(optimizer, report, "3", step)
                    scheduler.step()
                    totals.append(report.as_row()["total"])
                    self._log("3", epoch, report.as_row())
                huqnet.eval()
                val_mae = self.validation_mae(val)
                self._log("3", epoch, {"total": float(np.mean(totals)), "val_mae": val_mae})
                stopper.update(val_mae, epoch, huqnet)
                logger.info(f"Stage 3 epoch {epoch + 1}/{cfg.finetune_max_epochs}: "
                            f"loss={np.mean(totals):.4f} val_mae={val_mae:.4f}")
                if stopper.should_stop:
                    logger.info(f"Stage 3 stopped early after {epoch + 1} epochs")
                    break
        stopper.restore(huqnet)
        freeze(huqnet)
        if self.layout is not None:
            self.save_huqnet()
        return huqnet

    def fit(
        self,
        train: List[DatasetSample],
        stages: Sequence[str] = STAGES,
        extra: Sequence[DatasetSample] = (),
        corruption: Optional[CorruptionSpec] = None,
    ) -> "RefinementPipeline":
        """
        Run the requested stages in order; the prior is built first when missing.

        Args:
            train: Training split (its tail is held out for validation)
            stages: Any subset of "1", "2", "3"
            extra: Samples the oracle prior must also know, e.g. the test split
            corruption: Oracle corruption settings from the dataset manifest
        """
        unknown = set(stages) - set(STAGES)
        if unknown:
            raise ConfigurationError(f"Unknown training stages: {sorted(unknown)}")
        if not train:
            raise DatasetError("Training split is empty")
        fit_set, val_set = split_validation(train, self.config.train.val_fraction)
        if self.prior is None:
            self.train_prior(train, extra, corruption)
        if "1" in stages:
            self.train_stage1_huqnet(fit_set)
        if "2" in stages:
            self.train_stage2_denoiser(fit_set, val_set)
        if "3" in stages:
            self.train_stage3_finetune_huqnet(fit_set, val_set)
        return self

    # Inference

    @torch.no_grad()
    def uncertainty(
        self, x: torch.Tensor, Mc: torch.Tensor, source: UncertaintySource, generator: Optional[torch.Generator] = None
    ) -> torch.Tensor:
        source = UncertaintySource(source)
        if source is UncertaintySource.ZEROS:
            return torch.zeros_like(Mc)
        if source is UncertaintySource.ONES:
            return torch.ones_like(Mc)
        if source is UncertaintySource.ENTROPY:
            return entropy_map(Mc)
        huqnet = self._require("huqnet")
        huqnet.eval()
        return huqnet(x, Mc, generator).u_hat

    @torch.no_grad()
    def refine_batch(
        self,
        x: torch.Tensor,
        Mc: Optional[torch.Tensor] = None,
        inference: Optional[InferenceConfig] = None,
        generator: Optional[torch.Generator] = None,
        sample_ids: Optional[Sequence[str]] = None,
        M_GT: Optional[torch.Tensor] = None,
    ) -> List[RefinementRecord]:
        """
        Refine a batch of coarse masks.

        Args:
            x: Images, Bx3xHxW
            Mc: Coarse masks; taken from the prior when omitted
            inference: Sampling settings (run defaults when omitted)
            generator: Seeds the initial latent, the reverse steps and HUQNet's draws
            sample_ids: Names stored in the records
            M_GT: Ground truth; per-record metrics are filled in when given

        Returns:
            One RefinementRecord per image
        """
        prior = self._require("prior")
        denoiser = self._require("denoiser")
        denoiser.eval()
        icfg = inference or self.config.inference
        generator = generator or self._generator("inference", 0, icfg.seed)
        x = x.to(self.device)

        if Mc is None:
            Mc, features = prior.segment(x)
        else:
            Mc = Mc.to(self.device, x.dtype)
            features = prior.features(x)
        U = self.uncertainty(x, Mc, icfg.uncertainty_source, generator)
        Mc_tilde = mask_residual(U, Mc)
        cond = conditioning_map(denoiser.config, Mc, U)
        subsequence = select_ddim_subsequence(self.schedule.T_train, icfg.T_infer)

        def predict_noise(y_t: torch.Tensor, t: int) -> torch.Tensor:
            return denoiser(x, cond, y_t, t, features)

        y0_hat, trace = run_reverse_chain(
            self.schedule, subsequence, Mc_tilde, predict_noise, generator,
            sampler=icfg.sampler, sigma_rule=icfg.sigma_rule, support=U, threshold=icfg.threshold,
        )
        M_r = compose_refined_mask(y0_hat, U, Mc)

        records = []
        ids = list(sample_ids) if sample_ids is not None else [f"image_{i}" for i in range(x.shape[0])]
        for i in range(x.shape[0]):
            record = RefinementRecord(
                sample_id=ids[i], coarse=Mc[i].cpu(), uncertainty=U[i].cpu(), refined=M_r[i].cpu(),
                y0_hat=y0_hat[i].cpu(),
                trace=[latent[i].cpu() for latent in trace] if icfg.trace else [],
                timesteps=list(subsequence) + [0] if icfg.trace else [],
            )
            if M_GT is not None:
                gt = M_GT[i].cpu().numpy()
                record.metrics = {"coarse": evaluate_pair(record.coarse.numpy(), gt),
                                  "refined": evaluate_pair(record.refined.numpy(), gt)}
            records.append(record)
        return records

    def refine(
        self,
        x: torch.Tensor,
        Mc: Optional[torch.Tensor] = None,
        inference: Optional[InferenceConfig] = None,
        generator: Optional[torch.Generator] = None,
        sample_id: str = "image",
    ) -> RefinementRecord:
        """Refine one image (3xHxW or 1x3xHxW)."""
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if Mc is not None:
            Mc = Mc.reshape(1, 1, *x.shape[-2:])
        return self.refine_batch(x, Mc, inference, generator, [sample_id])[0]

    # Evaluation

    def _run_corpus(
        self, samples: List[DatasetSample], icfg: InferenceConfig
    ) -> Tuple[List[np.ndarray], List[np.ndarray], List[np.ndarray], List[np.ndarray], List[str]]:
        coarse, refined, uncertainty, gts, ids = [], [], [], [], []
        for index, batch in enumerate(iter_batches(samples, self.config.train.batch_size)):
            x, M_GT = stack_samples(batch, self.device)
            records = self.refine_batch(x, inference=icfg, generator=self._generator("inference", index, icfg.seed),
                                        sample_ids=[s.id for s in batch])
            for record, sample in zip(records, batch):
                coarse.append(record.coarse.squeeze(0).numpy())
                refined.append(record.refined.squeeze(0).numpy())
                uncertainty.append(record.uncertainty.squeeze(0).numpy())
                gts.append(sample.mask)
                ids.append(sample.id)
        return coarse, refined, uncertainty, gts, ids

    def evaluate_corpus(
        self, samples: List[DatasetSample], inference: Optional[InferenceConfig] = None, seeds: int = 1
    ) -> Tuple[MetricRow, MetricRow, List[Dict]]:
        """
        Coarse and refined metrics, averaged over `seeds` inference seeds.

        Returns:
            Tuple of (coarse row, refined row, per-sample rows)
        """
        if not samples:
            raise DatasetError("Cannot evaluate an empty corpus")
        icfg = inference or self.config.inference
        coarse_rows, refined_rows, sample_rows = [], [], []
        for k in range(seeds):
            run_cfg = icfg.replace(seed=icfg.seed + k)
            coarse, refined, _, gts, ids = self._run_corpus(samples, run_cfg)
            before, after = MetricAccumulator(), MetricAccumulator()
            for sid, c, r, gt in zip(ids, coarse, refined, gts):
                sample_rows.append({"seed": run_cfg.seed, "sample_id": sid, "variant": "coarse", **before.step(c, gt)})
                sample_rows.append({"seed": run_cfg.seed, "sample_id": sid, "variant": "refined", **after.step(r, gt)})
            coarse_rows.append(before.result())
            refined_rows.append(after.result())
            logger.info(f"Seed {run_cfg.seed}: coarse MAE {coarse_rows[-1].mae:.4f}, refined MAE {refined_rows[-1].mae:.4f}")
        return MetricRow.average(coarse_rows), MetricRow.average(refined_rows), sample_rows

    def ablate_steps(
        self, samples: List[DatasetSample], steps: Sequence[int], inference: Optional[InferenceConfig] = None
    ) -> List[Dict]:
        """Refined metrics and seconds per image for each T_infer."""
        icfg = inference or self.config.inference
        rows = []
        for T_infer in steps:
            started = time.perf_counter()
            _, refined, _, gts, _ = self._run_corpus(samples, icfg.replace(T_infer=int(T_infer)))
            elapsed = time.perf_counter() - started
            row = corpus_metrics(refined, gts)
            rows.append({"T_infer": int(T_infer), **row.to_dict(), "seconds_per_image": elapsed / len(samples)})
            logger.info(f"T_infer={T_infer}: MAE {row.mae:.4f}, {elapsed / len(samples):.4f} s/img")
        return rows

    def ablate_uncertainty(
        self, samples: List[DatasetSample], inference: Optional[InferenceConfig] = None
    ) -> List[Dict]:
        """
        Refined metrics per uncertainty source, plus mean |U - U_GT|.

        The "coarse" row is the unrefined prior (equivalently U = 0).
        """
        icfg = inference or self.config.inference
        rows = []
        for source in ABLATION_SOURCES:
            if source == "coarse":
                coarse, _, _, gts, _ = self._run_corpus(samples, icfg.replace(uncertainty_source=UncertaintySource.ZEROS))
                preds, maps = coarse, [np.zeros_like(c) for c in coarse]
                name = "coarse"
            else:
                coarse, preds, maps, gts, _ = self._run_corpus(samples, icfg.replace(uncertainty_source=source))
                name = source.value
            error = float(np.mean([np.abs(u - np.abs(c - g)).mean() for u, c, g in zip(maps, coarse, gts)]))
            row = corpus_metrics(preds, gts)
            rows.append({"source": name, **row.to_dict(), "uncertainty_error": error})
            logger.info(f"Uncertainty '{name}': MAE {row.mae:.4f}, |U - U_GT| {error:.4f}")
        return rows

    # Checkpoints

    def save_prior(self, path: Optional[Path] = None) -> Path:
        prior = self._require("prior")
        config = {"kind": prior.kind.value, "seed": self.config.prior.seed, "corruption": self.corruption.to_dict()}
        return save_checkpoint(path or self.layout.prior_checkpoint, prior.network, PRIOR_FORMAT, config)

    def save_huqnet(self, path: Optional[Path] = None) -> Path:
        huqnet = self._require("huqnet")
        return save_checkpoint(path or self.layout.huqnet_checkpoint, huqnet, HUQNET_FORMAT, huqnet.config.to_dict())

    def save_denoiser(self, path: Optional[Path] = None) -> Path:
        denoiser = self._require("denoiser")
        return save_checkpoint(path or self.layout.denoiser_checkpoint, denoiser, DENOISER_FORMAT,
                               denoiser.config.to_dict(), self.schedule.metadata())

    def load_prior(self, path: Path, samples: Sequence[DatasetSample] = ()) -> PriorSegmenter:
        """Rebuild the prior from its checkpoint; oracle priors re-register the given samples."""
        payload = load_checkpoint(path, PRIOR_FORMAT)
        config = payload["config"]
        kind = PriorKind(config.get("kind", PriorKind.ORACLE.value))
        if kind is PriorKind.TOY_CNN:
            prior = ToyCNNSegmenter(restore_state(ToyCNN(), payload))
        else:
            self.corruption = CorruptionSpec.from_dict(config.get("corruption"))
            prior = CorruptedOracleSegmenter(self.corruption, int(config.get("seed", 0)))
            restore_state(prior.network, payload)
            prior.register_samples(samples)
        freeze(prior.network)
        self.prior = prior.to(self.device)
        return self.prior

    def load_huqnet(self, path: Path) -> HUQNet:
        payload = load_checkpoint(path, HUQNET_FORMAT)
        self.huqnet = freeze(restore_state(HUQNet(HUQNetConfig.from_dict(payload["config"])), payload).to(self.device))
        return self.huqnet

    def load_denoiser(self, path: Path) -> Denoiser:
        payload = load_checkpoint(path, DENOISER_FORMAT)
        if payload.get("schedule") is None:
            raise CheckpointError(f"{path} carries no noise schedule")
        self.schedule = schedule_from_metadata(payload["schedule"])
        model = Denoiser(DenoiserConfig.from_dict(payload["config"]), self.schedule.T_train)
        self.denoiser = freeze(restore_state(model, payload).to(self.device))
        return self.denoiser

    @classmethod
    def from_run(
        cls,
        run: Union[str, Path],
        data_dir: Optional[Union[str, Path]] = None,
        config: Optional[RunConfig] = None,
        require: Sequence[str] = ("prior", "huqnet", "denoiser"),
    ) -> "RefinementPipeline":
        """
        Open an existing run directory and load whatever checkpoints it holds.

        Args:
            run: Run directory or bare run name
            data_dir: Dataset used to re-register an oracle prior (config value when omitted)
            config: Overrides the stored config
            require: Components that must be present

        Raises:
            CheckpointError: If a required checkpoint is missing
        """
        layout = RunLayout.at(run)
        if config is None:
            config = load_run_config(layout.config if layout.config.is_file() else None)
        pipeline = cls(config, run_dir=layout.root)
        data_dir = data_dir or config.data_dir

        samples: List[DatasetSample] = []
        if data_dir is not None and layout.prior_checkpoint.is_file():
            pipeline.corruption = load_manifest(data_dir).corruption
            samples = load_dataset(data_dir, "train") + load_dataset(data_dir, "test")

        loaders = {
            "prior": (layout.prior_checkpoint, lambda p: pipeline.load_prior(p, samples)),
            "huqnet": (layout.huqnet_checkpoint, pipeline.load_huqnet),
            "denoiser": (layout.denoiser_checkpoint, pipeline.load_denoiser),
        }
        for name, (path, loader) in loaders.items():
            if path.is_file():
                loader(path)
            elif name in require:
                logger.error(f"Run {layout.root} has no {name} checkpoint")
                raise CheckpointError(f"Missing {name} checkpoint: {path}")
        return pipeline
