"""
Search orchestration
Generic REINFORCE search over a space with a pluggable evaluator, the
generator/discriminator evaluators (real and surrogate), search-log replay,
and the four-phase pipeline with checkpoint/resume.
"""

import csv
import json
import logging
import math
import signal
import threading
import time
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, TextIO, Tuple

import numpy as np

from config import (
    CACHE_DIR_NAME, CACHE_INDEX_FILE, CONFIG_FILE, CONTROLLER_CKPT_FILE, GATE_PENALTY_REWARD,
    MANIFEST_FILE, MAX_CONSECUTIVE_REJECTS, SEARCH_LOG_FILE, SNAPSHOT_DIR_NAME,
)
from controller import Controller, RewardPipeline, load_checkpoint, save_checkpoint
from cost_model import CostLimit, CostReport, discriminator_cost, gate, generator_cost
from errors import (
    CheckpointError, ConfigError, DivergedError, ParseError, ReplayMismatch, SearchError, TinySRError,
)
from model_builder import (
    GeneratorNet, InitSource, build_discriminator, build_generator, load_generator,
    save_discriminator, save_generator,
)
from run_config import ControllerConfig, RunConfig, SearchConfig
from search_space import (
    DISCRIMINATOR, GENERATOR, OP_KINDS, REDOP_KINDS, Genome, SearchSpace, decode_discriminator,
    decode_generator, genome_from_dict, genome_to_dict, make_genome,
)
from sr_data import Dataset, generate_dataset
from trainer import DistortionConfig, EvalReport, GanConfig, train_distortion, train_gan
from weight_cache import WeightCache

logger = logging.getLogger(__name__)

PHASES = ("generator_search", "distortion_training", "discriminator_search", "gan_finetune")


def derive_seed(base: int, step: int) -> int:
    return int(np.random.SeedSequence([base, step]).generate_state(1)[0])


# ── Stop token ──────────────────────────────────────────────────

class StopToken:
    """Set by SIGINT/SIGTERM; the search checkpoints and returns when it sees it"""

    def __init__(self):
        self._event = threading.Event()

    def set(self) -> None:
        self._event.set()

    def is_set(self) -> bool:
        return self._event.is_set()


def install_signal_handlers(token: StopToken) -> None:
    def handler(signum, frame):
        logger.warning(f"⚠️  Received signal {signum}, stopping after in-flight evaluations")
        token.set()

    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, handler)


# ── Search log ──────────────────────────────────────────────────

@dataclass
class SearchLogRecord:
    step: int
    decisions: List[int]
    gate: str                               # pass | reject | none
    mult_adds: Optional[int] = None
    metric: Optional[float] = None
    failure: Optional[str] = None
    reward: Optional[float] = None
    entropy: float = 0.0
    log_prob: float = 0.0
    controller_loss: Optional[float] = None
    wall_time: float = 0.0
    worker_id: int = 0

    @property
    def evaluated(self) -> bool:
        return self.gate != "reject"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict, line: int = 0) -> "SearchLogRecord":
        names = {f.name for f in fields(cls)}
        for required in ("step", "decisions", "gate"):
            if required not in data:
                raise ParseError(f"line {line}: {required}", "missing")
        return cls(**{k: v for k, v in data.items() if k in names})


class SearchLog:
    """Append-only JSONL file with a single writer"""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, record: SearchLogRecord) -> None:
        with self._lock:
            try:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a") as f:
                    f.write(json.dumps(record.to_dict()) + "\n")
            except OSError as e:
                raise CheckpointError(f"Could not append to {self.path}: {e}")

    def read(self) -> List[SearchLogRecord]:
        return read_log(self.path)

    def truncate(self, count: int) -> None:
        """Keep the first `count` records (drops work done after the last checkpoint)"""
        if not self.path.exists():
            return
        lines = self.path.read_text().splitlines(keepends=True)[:count]
        self.path.write_text("".join(lines))

    def __len__(self) -> int:
        if not self.path.exists():
            return 0
        return sum(1 for line in self.path.read_text().splitlines() if line.strip())


def read_log(path: Path) -> List[SearchLogRecord]:
    records = []
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise CheckpointError(f"Could not read search log {path}: {e}")
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"line {n}", f"invalid JSON: {e}")
        records.append(SearchLogRecord.from_dict(data, n))
    return records


def export_csv(records: Iterable[SearchLogRecord], out: TextIO) -> None:
    columns = [f.name for f in fields(SearchLogRecord)]
    writer = csv.DictWriter(out, fieldnames=columns)
    writer.writeheader()
    for record in records:
        row = record.to_dict()
        row["decisions"] = " ".join(str(d) for d in record.decisions)
        writer.writerow(row)


def log_stats(records: List[SearchLogRecord], maximize: bool = True) -> dict:
    evaluated = [r for r in records if r.evaluated]
    scored = [r for r in evaluated if r.metric is not None]
    rejected = len(records) - len(evaluated)
    best = _best_record(scored, maximize)
    rewards = [r.reward for r in evaluated if r.reward is not None]
    return {
        "records": len(records),
        "evaluated": len(evaluated),
        "rejected": rejected,
        "reject_rate": rejected / len(records) if records else 0.0,
        "failures": sum(1 for r in evaluated if r.failure),
        "best_metric": None if best is None else best.metric,
        "best_step": None if best is None else best.step,
        "best_decisions": None if best is None else best.decisions,
        "mean_reward": float(np.mean(rewards)) if rewards else None,
    }


def _best_record(records: List[SearchLogRecord], maximize: bool) -> Optional[SearchLogRecord]:
    best = None
    for r in records:
        if best is None or (r.metric > best.metric if maximize else r.metric < best.metric):
            best = r
    return best


# ── Evaluators ──────────────────────────────────────────────────

class Evaluator:
    """Scores one genome; `limit` set means cost-gated"""

    kind = ""
    maximize = True
    limit: Optional[CostLimit] = None

    def cost(self, genome: Genome) -> CostReport:
        raise NotImplementedError

    def evaluate(self, genome: Genome, step: int, seed: int) -> float:
        raise NotImplementedError


class GeneratorEvaluator(Evaluator):
    """Warm-start from the cache, train on the proxy distortion task, commit back"""

    kind = GENERATOR
    maximize = True

    def __init__(self, dataset: Dataset, config: DistortionConfig, limit: CostLimit,
                 channels: int, cache: Optional[WeightCache] = None):
        self.dataset = dataset
        self.config = config
        self.limit = limit
        self.channels = channels
        self.cache = cache

    def cost(self, genome: Genome) -> CostReport:
        return generator_cost(decode_generator(genome), self.channels, self.dataset.scale,
                              self.limit.ref_resolution)

    def evaluate(self, genome: Genome, step: int, seed: int) -> float:
        net = build_generator(genome, self.channels, self.dataset.scale, InitSource(seed, self.cache))
        report = train_distortion(net, self.dataset, replace(self.config, seed=seed))
        if self.cache is not None:
            self.cache.commit_network(net, report.value, step)
        return report.value


class DiscriminatorEvaluator(Evaluator):
    """Fresh discriminator, GAN fine-tune of a copy of the best generator"""

    kind = DISCRIMINATOR
    maximize = False

    def __init__(self, dataset: Dataset, config: GanConfig, generator: GeneratorNet,
                 channels: int, bottleneck: int = 0):
        self.dataset = dataset
        self.config = config
        self.generator = generator
        self.channels = channels
        self.bottleneck = bottleneck

    def cost(self, genome: Genome) -> CostReport:
        return discriminator_cost(decode_discriminator(genome), self.channels, self.bottleneck,
                                  self.config.hr_patch)

    def evaluate(self, genome: Genome, step: int, seed: int) -> float:
        generator = self.generator.clone()
        discriminator = build_discriminator(genome, self.channels, self.bottleneck, self.config.hr_patch, seed)
        report = train_gan(generator, discriminator, self.dataset, replace(self.config, seed=seed))
        return report.value


def _digest_noise(genome: Genome, seed: int) -> float:
    return float(np.random.default_rng([int(genome.digest, 16) % 2 ** 63, seed]).standard_normal())


class SurrogateGeneratorEvaluator(Evaluator):
    """Deterministic smooth PSNR-like score; still passes through the real cost gate"""

    kind = GENERATOR
    maximize = True

    def __init__(self, limit: CostLimit, channels: int, scale: int, seed: int = 0):
        self.limit = limit
        self.channels = channels
        self.scale = scale
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.op_quality = rng.normal(0.0, 0.4, size=len(OP_KINDS))

    def cost(self, genome: Genome) -> CostReport:
        return generator_cost(decode_generator(genome), self.channels, self.scale, self.limit.ref_resolution)

    def evaluate(self, genome: Genome, step: int, seed: int) -> float:
        cell = decode_generator(genome)
        score = 28.0 + sum(self.op_quality[op] for op in genome.op_choices)
        score += 0.05 * len(cell.leaves)
        return float(score + 0.02 * _digest_noise(genome, self.seed))


class SurrogateDiscriminatorEvaluator(Evaluator):
    """Deterministic positive feature-distance-like score (lower better)"""

    kind = DISCRIMINATOR
    maximize = False

    def __init__(self, channels: int, bottleneck: int, patch: int, seed: int = 0):
        self.channels = channels
        self.bottleneck = bottleneck
        self.patch = patch
        self.seed = seed
        rng = np.random.default_rng(seed + 1)
        self.op_quality = rng.normal(0.0, 0.1, size=len(OP_KINDS))
        self.redop_quality = rng.normal(0.0, 0.1, size=len(REDOP_KINDS))

    def cost(self, genome: Genome) -> CostReport:
        return discriminator_cost(decode_discriminator(genome), self.channels, self.bottleneck, self.patch)

    def evaluate(self, genome: Genome, step: int, seed: int) -> float:
        total = sum(self.op_quality[op] + self.redop_quality[red]
                    for op, red in zip(genome.op_choices, genome.redop_choices))
        return float(0.3 * math.exp(total + 0.01 * _digest_noise(genome, self.seed)))


# ── Search ──────────────────────────────────────────────────────

@dataclass
class SearchResult:
    best: Optional[Genome]
    best_metric: Optional[float]
    best_step: Optional[int]
    completed: int
    stopped: bool = False
    records: List[SearchLogRecord] = field(default_factory=list)


def _is_better(metric: float, best: Optional[float], maximize: bool) -> bool:
    if best is None:
        return True
    return metric > best if maximize else metric < best


def search(space: SearchSpace, steps: int, evaluator: Evaluator, controller: Controller,
           pipeline: RewardPipeline, workers: int = 1, gate_mode: str = "skip",
           log: Optional[SearchLog] = None, checkpoint_path: Optional[Path] = None,
           checkpoint_every: int = 10, cache: Optional[WeightCache] = None,
           cache_dir: Optional[Path] = None, stop: Optional[StopToken] = None,
           seed: int = 0, progress: Optional[dict] = None) -> SearchResult:
    """
    sample -> (gate) -> evaluate -> reward -> REINFORCE update, for `steps` evaluations.

    Gate-rejected samples are re-drawn without consuming a step; in "penalty"
    mode they also update the controller with a fixed reward. Evaluations run on
    a thread pool; the controller, the pipeline and the log are only touched
    from this thread. s* is the best metric seen, first one kept on ties.
    """
    if evaluator.kind != space.kind:
        raise ConfigError(f"{evaluator.kind} evaluator cannot score a {space.kind} space")
    progress = dict(progress or {})
    completed = progress.get("completed", 0)
    dispatched = completed
    rejects = progress.get("consecutive_rejects", 0)
    best = progress.get("best")
    best_metric = None if best is None else best["metric"]
    records: List[SearchLogRecord] = []
    stop = stop or StopToken()

    def write(record: SearchLogRecord) -> None:
        records.append(record)
        if log is not None:
            log.append(record)

    def checkpoint() -> None:
        if checkpoint_path is None:
            return
        state = {"completed": completed, "consecutive_rejects": rejects, "best": best,
                 "log_records": len(log) if log is not None else 0}
        save_checkpoint(checkpoint_path, controller, pipeline, state)
        if cache is not None and cache_dir is not None:
            cache.save(cache_dir)
        logger.debug(f"  💾 Checkpoint at step {completed}")

    pending: Dict[Future, Tuple[int, object, Optional[int], int, str]] = {}
    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix=f"{space.kind}-eval") as pool:
        while completed < steps:
            while not stop.is_set() and len(pending) < workers and dispatched < steps:
                sample = controller.sample()
                genome = sample.genome
                report = evaluator.cost(genome)
                if evaluator.limit is not None and not gate(report, evaluator.limit).passed:
                    rejects += 1
                    record = SearchLogRecord(dispatched + 1, list(sample.decisions), "reject", report.mult_adds,
                                             entropy=sample.entropy, log_prob=sample.log_prob)
                    if gate_mode == "penalty":
                        record.reward = GATE_PENALTY_REWARD
                        record.controller_loss = controller.reinforce_update(genome, GATE_PENALTY_REWARD)
                    write(record)
                    if rejects > MAX_CONSECUTIVE_REJECTS:
                        raise SearchError(f"{rejects} consecutive samples exceeded the Mult-Adds limit")
                    continue
                rejects = 0
                dispatched += 1
                worker_id = (dispatched - 1) % workers
                future = pool.submit(_run_evaluation, evaluator, genome, dispatched,
                                     derive_seed(seed, dispatched))
                gate_tag = "pass" if evaluator.limit is not None else "none"
                pending[future] = (dispatched, sample, report.mult_adds, worker_id, gate_tag)

            if not pending:
                break
            done, _ = wait(pending, return_when=FIRST_COMPLETED)
            for future in sorted(done, key=lambda f: pending[f][0]):
                step, sample, mult_adds, worker_id, gate_tag = pending.pop(future)
                metric, failure, wall = future.result()
                if failure is None:
                    reward = pipeline.compute_reward(metric, sample.entropy)
                else:
                    reward = pipeline.worst_reward(sample.entropy)
                loss = controller.reinforce_update(sample.genome, reward)
                completed += 1
                if failure is None and _is_better(metric, best_metric, evaluator.maximize):
                    best_metric = metric
                    best = {"decisions": list(sample.decisions), "metric": metric, "step": step}
                write(SearchLogRecord(step, list(sample.decisions), gate_tag, mult_adds, metric, failure,
                                      reward, sample.entropy, sample.log_prob, loss, wall, worker_id))
                shown = "failed" if failure else f"{metric:.4f}"
                logger.info(f"  🔍 {space.kind} step {step}/{steps}: metric {shown} | "
                            f"reward {reward:+.4f} | best {best_metric if best_metric is None else round(best_metric, 4)}")
                if completed % checkpoint_every == 0:
                    checkpoint()
            if stop.is_set() and not pending:
                break

    checkpoint()
    stopped = completed < steps
    if stopped:
        logger.warning(f"⚠️  Search stopped at step {completed}/{steps}; resume from the checkpoint")
    best_genome = None if best is None else make_genome(space, best["decisions"])
    return SearchResult(best_genome, best_metric, None if best is None else best["step"],
                        completed, stopped, records)


def _run_evaluation(evaluator: Evaluator, genome: Genome, step: int,
                    seed: int) -> Tuple[Optional[float], Optional[str], float]:
    """Worker body; failures come back as values so the main loop stays consistent"""
    start = time.time()
    try:
        metric = evaluator.evaluate(genome, step, seed)
        if not math.isfinite(metric):
            raise DivergedError(f"Evaluator returned {metric}")
        return metric, None, time.time() - start
    except CheckpointError:
        raise
    except (TinySRError, ArithmeticError, ValueError) as e:
        logger.warning(f"⚠️  Step {step} evaluation failed: {type(e).__name__}: {e}")
        return None, f"{type(e).__name__}: {e}", time.time() - start


# ── Replay ──────────────────────────────────────────────────────

def replay_log(records: List[SearchLogRecord], pipeline: RewardPipeline,
               controller: Optional[Controller] = None) -> int:
    """
    Recompute every reward from logged metrics through a fresh pipeline and
    compare bit-exactly. With a fresh controller (single-worker runs) the logged
    log-probabilities are re-derived too. Returns the number of records checked.
    """
    for record in records:
        if controller is not None:
            log_prob, _ = controller.log_prob_and_entropy(record.decisions)
            if not math.isclose(log_prob, record.log_prob, rel_tol=1e-12, abs_tol=1e-12):
                raise ReplayMismatch(record.step, f"log_prob {record.log_prob!r} != replayed {log_prob!r}")
        if record.gate == "reject":
            expected = None if record.reward is None else GATE_PENALTY_REWARD
        elif record.failure is None and record.metric is not None:
            expected = pipeline.compute_reward(record.metric, record.entropy)
        else:
            expected = pipeline.worst_reward(record.entropy)
        if expected != record.reward:
            raise ReplayMismatch(record.step, f"logged reward {record.reward!r} != replayed {expected!r}")
        if controller is not None and expected is not None:
            controller.reinforce_update(record.decisions, expected)
    return len(records)


# ── Factories ───────────────────────────────────────────────────

def search_space_for(kind: str, config: SearchConfig) -> SearchSpace:
    return SearchSpace(kind, config.size, config.num_ops or len(OP_KINDS),
                       config.num_redops or len(REDOP_KINDS))


def make_controller(space: SearchSpace, config: ControllerConfig, seed: int) -> Controller:
    return Controller.for_space(space, hidden=config.hidden, lr=config.lr, seed=seed,
                                tanh_constant=config.tanh_constant, temperature=config.temperature)


def make_pipeline(config: ControllerConfig, maximize: bool) -> RewardPipeline:
    return RewardPipeline(decay=config.ema_decay, entropy_weight=config.entropy_weight, maximize=maximize)


# ── Run directory ───────────────────────────────────────────────

class RunDirectory:
    """Paths and the phase manifest of one pipeline run"""

    def __init__(self, root: Path):
        self.root = Path(root)

    @property
    def config_path(self) -> Path:
        return self.root / CONFIG_FILE

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_FILE

    @property
    def cache_dir(self) -> Path:
        return self.root / CACHE_DIR_NAME

    @property
    def snapshot_dir(self) -> Path:
        return self.root / SNAPSHOT_DIR_NAME

    def log_path(self, kind: str) -> Path:
        return self.root / kind / SEARCH_LOG_FILE

    def checkpoint_path(self, kind: str) -> Path:
        return self.root / kind / CONTROLLER_CKPT_FILE

    def snapshot(self, name: str) -> Path:
        return self.snapshot_dir / name

    def prepare(self, config: RunConfig) -> None:
        """Bind the directory to `config`; refuse a directory made by another config"""
        self.root.mkdir(parents=True, exist_ok=True)
        manifest = self.manifest()
        if manifest.get("config_hash") not in (None, config.config_hash()):
            raise ConfigError(f"Run directory {self.root} was created with a different config")
        if not self.config_path.exists():
            config.save(self.config_path)
        if "config_hash" not in manifest:
            manifest.update({"config_hash": config.config_hash(), "phases": {}})
            self.save_manifest(manifest)

    def manifest(self) -> dict:
        if not self.manifest_path.exists():
            return {}
        try:
            return json.loads(self.manifest_path.read_text())
        except json.JSONDecodeError as e:
            raise ParseError(str(self.manifest_path), f"invalid JSON: {e}")

    def save_manifest(self, manifest: dict) -> None:
        tmp = self.manifest_path.with_name(MANIFEST_FILE + ".tmp")
        try:
            tmp.write_text(json.dumps(manifest, indent=2))
            tmp.replace(self.manifest_path)
        except OSError as e:
            raise CheckpointError(f"Could not write {self.manifest_path}: {e}")

    def phase(self, name: str) -> Optional[dict]:
        info = self.manifest().get("phases", {}).get(name)
        return info if info and info.get("status") == "done" else None

    def mark_done(self, name: str, info: dict) -> None:
        manifest = self.manifest()
        manifest.setdefault("phases", {})[name] = {"status": "done", **info}
        self.save_manifest(manifest)


def _run_search_phase(kind: str, config: RunConfig, rundir: RunDirectory, evaluator: Evaluator,
                      stop: Optional[StopToken], cache: Optional[WeightCache] = None) -> SearchResult:
    search_cfg = config.generator_search if kind == GENERATOR else config.discriminator_search
    space = search_space_for(kind, search_cfg)
    log = SearchLog(rundir.log_path(kind))
    ckpt = rundir.checkpoint_path(kind)
    progress = None
    if ckpt.exists():
        controller, pipeline, progress = load_checkpoint(ckpt)
        log.truncate(progress.get("log_records", 0))
        logger.warning(f"⚠️  Resuming {kind} search at step {progress.get('completed', 0)}")
    else:
        log.truncate(0)
        controller = make_controller(space, config.controller, search_cfg.seed)
        pipeline = make_pipeline(config.controller, evaluator.maximize)
    return search(space, search_cfg.steps, evaluator, controller, pipeline, search_cfg.workers,
                  search_cfg.gate_mode, log, ckpt, search_cfg.checkpoint_every, cache,
                  rundir.cache_dir if cache is not None else None, stop, search_cfg.seed, progress)


# ── Phases ──────────────────────────────────────────────────────

def run_generator_search(config: RunConfig, rundir: RunDirectory,
                         stop: Optional[StopToken] = None) -> Optional[Genome]:
    """Phase 1; returns s*_G, or None when stopped early"""
    done = rundir.phase("generator_search")
    if done:
        return genome_from_dict(done["genome"])
    logger.info("🔍 Phase 1: generator search")
    scfg = config.generator_search
    limit = CostLimit(scfg.mult_adds_limit, tuple(config.ref_resolution))
    cache = None
    if scfg.evaluator == "surrogate":
        evaluator = SurrogateGeneratorEvaluator(limit, config.channels, config.scales[0], scfg.seed)
    else:
        cache = WeightCache.load(rundir.cache_dir) if rundir.cache_dir.exists() else WeightCache(config.channels)
        evaluator = GeneratorEvaluator(generate_dataset(config.dataset), config.distortion_proxy, limit,
                                       config.channels, cache)
    result = _run_search_phase(GENERATOR, config, rundir, evaluator, stop, cache)
    if result.stopped or result.best is None:
        return None
    rundir.mark_done("generator_search", {"genome": genome_to_dict(result.best), "metric": result.best_metric,
                                          "step": result.best_step, "seed": scfg.seed})
    logger.info(f"✅ Generator search done: best PSNR {result.best_metric:.4f} at step {result.best_step}")
    return result.best


def _dataset_for(config: RunConfig, scale: int) -> Dataset:
    return generate_dataset(replace(config.dataset, scale=scale))


def _fresh(trace: Path) -> Path:
    """Training traces restart with the phase"""
    trace.unlink(missing_ok=True)
    return trace


def run_distortion_training(config: RunConfig, rundir: RunDirectory, genome: Genome) -> Path:
    """Phase 2: full-task training per scale; x4 starts from the x2 weights. Returns the G_best stem."""
    done = rundir.phase("distortion_training")
    if done:
        return Path(done["snapshot"])
    logger.info("🏋️ Phase 2: full distortion training")
    cache = WeightCache.load(rundir.cache_dir) if (rundir.cache_dir / CACHE_INDEX_FILE).exists() else None
    stem, results = train_full_generator(config, genome, rundir.snapshot_dir, cache)
    rundir.mark_done("distortion_training", {"snapshot": str(stem), "scales": results})
    return stem


def train_full_generator(config: RunConfig, genome: Genome, out_dir: Path,
                         cache: Optional[WeightCache] = None) -> Tuple[Path, dict]:
    """Train `genome` at every configured scale into out_dir; returns the last stem and per-scale PSNR"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    previous: Optional[GeneratorNet] = None
    results = {}
    stem = None
    for scale in config.scales:
        init = InitSource(config.seed, cache=cache if previous is None else None,
                          snapshot=None if previous is None else previous.state_dict())
        net = build_generator(genome, config.channels, scale, init)
        dataset = _dataset_for(config, scale)
        trace = _fresh(out_dir / f"train_x{scale}.jsonl")
        report = train_distortion(net, dataset, config.distortion_full, trace_path=trace)
        stem = out_dir / f"generator_x{scale}"
        save_generator(net, stem, {"psnr": report.value, "seed": config.distortion_full.seed,
                                   "mean_rgb": dataset.mean_rgb.tolist()})
        results[f"x{scale}"] = {"psnr": report.value, "snapshot": str(stem)}
        logger.info(f"  ✅ x{scale}: validation PSNR {report.value:.2f} dB")
        previous = net
    return stem, results


def run_discriminator_search(config: RunConfig, rundir: RunDirectory, generator_stem: Path,
                             stop: Optional[StopToken] = None) -> Optional[Genome]:
    """Phase 3; no weight sharing"""
    done = rundir.phase("discriminator_search")
    if done:
        return genome_from_dict(done["genome"])
    logger.info("🔍 Phase 3: discriminator search")
    scfg = config.discriminator_search
    if scfg.evaluator == "surrogate":
        evaluator = SurrogateDiscriminatorEvaluator(config.channels, config.bottleneck,
                                                    config.gan_proxy.hr_patch, scfg.seed)
    else:
        generator, _ = load_generator(generator_stem)
        evaluator = DiscriminatorEvaluator(_dataset_for(config, generator.scale), config.gan_proxy,
                                           generator, config.channels, config.bottleneck)
    result = _run_search_phase(DISCRIMINATOR, config, rundir, evaluator, stop)
    if result.stopped or result.best is None:
        return None
    rundir.mark_done("discriminator_search", {"genome": genome_to_dict(result.best),
                                              "metric": result.best_metric, "step": result.best_step,
                                              "seed": scfg.seed})
    logger.info(f"✅ Discriminator search done: best feature distance {result.best_metric:.5f}")
    return result.best


def run_gan_finetune(config: RunConfig, rundir: RunDirectory, generator_stem: Path,
                     d_genome: Genome) -> Path:
    """Phase 4: fine-tune G_best against D_best on the full perceptual task"""
    done = rundir.phase("gan_finetune")
    if done:
        return Path(done["snapshot"])
    logger.info("🎨 Phase 4: GAN fine-tuning")
    stem, report, provenance = finetune_generator(config, generator_stem, d_genome, rundir.snapshot_dir,
                                                  str(rundir.root))
    manifest = rundir.manifest()
    manifest["provenance"] = provenance
    rundir.save_manifest(manifest)
    rundir.mark_done("gan_finetune", {"snapshot": str(stem), "feat_dist": report.value})
    logger.info(f"✅ Final generator saved: feature distance {report.value:.5f}")
    return stem


def finetune_generator(config: RunConfig, generator_stem: Path, d_genome: Genome, out_dir: Path,
                       run_dir: str = "") -> Tuple[Path, EvalReport, dict]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    generator, _ = load_generator(generator_stem)
    gcfg = config.gan_full
    discriminator = build_discriminator(d_genome, config.channels, config.bottleneck, gcfg.hr_patch, config.seed)
    dataset = _dataset_for(config, generator.scale)
    report = train_gan(generator, discriminator, dataset, gcfg, trace_path=_fresh(out_dir / "gan_finetune.jsonl"))
    provenance = provenance_for(config, run_dir, generator.genome, d_genome)
    stem = out_dir / "generator_final"
    save_generator(generator, stem, {"provenance": provenance, "feat_dist": report.value,
                                     "mean_rgb": dataset.mean_rgb.tolist()})
    save_discriminator(discriminator, out_dir / "discriminator_final", {"provenance": provenance})
    return stem, report, provenance


def provenance_for(config: RunConfig, run_dir: str, g_genome: Genome, d_genome: Genome) -> dict:
    return {
        "generator_genome": genome_to_dict(g_genome),
        "discriminator_genome": genome_to_dict(d_genome),
        "config_hash": config.config_hash(),
        "seeds": {
            "run": config.seed,
            "dataset": config.dataset.seed,
            "generator_search": config.generator_search.seed,
            "discriminator_search": config.discriminator_search.seed,
            "distortion_full": config.distortion_full.seed,
            "gan_full": config.gan_full.seed,
        },
        "run_dir": run_dir,
    }


@dataclass
class PipelineResult:
    completed: bool
    generator_genome: Optional[Genome] = None
    discriminator_genome: Optional[Genome] = None
    generator_snapshot: Optional[Path] = None
    final_snapshot: Optional[Path] = None


def run_pipeline(config: RunConfig, run_dir: Path, stop: Optional[StopToken] = None) -> PipelineResult:
    """All four phases; finished phases recorded in manifest.json are skipped on resume"""
    rundir = RunDirectory(run_dir)
    rundir.prepare(config)
    g_genome = run_generator_search(config, rundir, stop)
    if g_genome is None:
        return PipelineResult(False)
    g_stem = run_distortion_training(config, rundir, g_genome)
    d_genome = run_discriminator_search(config, rundir, g_stem, stop)
    if d_genome is None:
        return PipelineResult(False, g_genome, generator_snapshot=g_stem)
    final = run_gan_finetune(config, rundir, g_stem, d_genome)
    return PipelineResult(True, g_genome, d_genome, g_stem, final)


def replay_run(rundir: RunDirectory, kind: str, config: RunConfig) -> int:
    """Verify a stage's log; single-worker runs are replayed through a fresh controller too"""
    search_cfg = config.generator_search if kind == GENERATOR else config.discriminator_search
    records = read_log(rundir.log_path(kind))
    maximize = kind == GENERATOR
    controller = None
    if search_cfg.workers == 1:
        controller = make_controller(search_space_for(kind, search_cfg), config.controller, search_cfg.seed)
    return replay_log(records, make_pipeline(config.controller, maximize), controller)
