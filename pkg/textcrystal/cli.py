"""
Command-line interface

Commands: make-toy, gen-prompts, train, sample, evaluate. Each command reads an
optional JSON run config (``--config``); flags given on the command line win.
"""

import argparse
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Type, TypeVar

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, ValidationError

from textcrystal import __version__
from textcrystal.core.config import settings
from textcrystal.core.exceptions import ConfigError, DataError, TextCrystalException
from textcrystal.core.logging_config import setup_logging
from textcrystal.schemas.config import (
    EvaluateRunConfig,
    GenPromptsRunConfig,
    SampleRunConfig,
    ToyRunConfig,
    TrainRunConfig,
)
from textcrystal.schemas.crystal import CrystalMeta
from textcrystal.schemas.prompt import PromptRecordIn
from textcrystal.services.checkpoint import load_checkpoint, save_checkpoint
from textcrystal.services.composition import reduced_formula_of_labels
from textcrystal.services.crystal import Crystal
from textcrystal.services.dataset_io import (
    read_jsonl_dataset,
    read_prompt_records,
    write_frame,
    write_jsonl,
    write_jsonl_dataset,
)
from textcrystal.services.evaluation import Evaluator, MetadataPropertyPredictor, write_report
from textcrystal.services.prompts import constraints_from_meta, make_short_prompt, parse_prompt, try_parse_prompt
from textcrystal.services.sampler import SampleResult, Sampler
from textcrystal.services.text_encoder import HashTextEncoder, load_external_embeddings
from textcrystal.services.toy_data import make_toy_dataset, split_dataset
from textcrystal.services.trainer import Trainer

logger = logging.getLogger(__name__)

TOOL_NAME = "textcrystal"
C = TypeVar("C", bound=BaseModel)


# ---------------------------------------------------------------- configuration

def _set_path(target: Dict[str, Any], path: Tuple[str, ...], value: Any) -> None:
    for key in path[:-1]:
        target = target.setdefault(key, {})
    target[path[-1]] = value


def load_run_config(model: Type[C], path: Optional[str], overrides: Mapping[Tuple[str, ...], Any]) -> C:
    """Validate a JSON run config with flag overrides applied on top"""
    data: Dict[str, Any] = {}
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})")
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: run config must be a JSON object")
    for key_path, value in overrides.items():
        if value is not None:
            _set_path(data, key_path, value)
    try:
        return model.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first.get("loc", ()))
        raise ConfigError(f"Invalid run config at {where or '<root>'}: {first.get('msg')}")


def config_hash(config: BaseModel) -> str:
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def provenance(command: str, config: BaseModel, seed: int) -> Dict[str, Any]:
    """Header echoed into every output: tool, command, effective config and seed"""
    return {
        "tool": TOOL_NAME,
        "version": __version__,
        "command": command,
        "config": config.model_dump(mode="json"),
        "config_hash": config_hash(config),
        "seed": seed,
    }


def _require(value: Optional[str], flag: str) -> str:
    if not value:
        raise ConfigError(f"{flag} is required")
    return value


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".timings.json")


def _write_timings(path: Path, payload: Mapping[str, Any]) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"📝 Timings written to {path}")


def _prompt_meta(c: Crystal) -> CrystalMeta:
    """Crystal metadata with the formula filled in from the atoms when missing"""
    meta = c.meta or CrystalMeta()
    if meta.formula:
        return meta
    return meta.model_copy(update={"formula": reduced_formula_of_labels(c.atom_types)})


# ---------------------------------------------------------------- commands

def cmd_make_toy(cfg: ToyRunConfig) -> int:
    out = Path(cfg.out or "toy.jsonl")
    crystals = make_toy_dataset(cfg.num_structures, cfg.seed, cfg.rattle, cfg.strain)
    prov = provenance("make-toy", cfg, cfg.seed)
    if not cfg.split:
        write_jsonl_dataset(crystals, out, prov)
        return 0
    for name, part in zip(("train", "val", "test"), split_dataset(crystals, cfg.seed)):
        write_jsonl_dataset(part, out.with_name(f"{out.stem}.{name}{out.suffix}"), prov)
    return 0


def cmd_gen_prompts(cfg: GenPromptsRunConfig) -> int:
    crystals = read_jsonl_dataset(_require(cfg.dataset, "--dataset"))
    out = Path(cfg.out or "prompts.jsonl")
    rows: List[Dict[str, Any]] = []
    sparse = 0
    mismatched = 0
    for c in crystals:
        meta = _prompt_meta(c)
        if c.meta is None or c.meta.formation_energy is None or c.meta.crystal_system is None:
            sparse += 1
        text = make_short_prompt(meta)
        if parse_prompt(text) != constraints_from_meta(meta):
            mismatched += 1
        rows.append({"id": c.id, "text": text, "atom_types": [int(a) for a in c.atom_types]})
    write_jsonl(out, rows, provenance("gen-prompts", cfg, cfg.seed))
    if sparse:
        logger.warning(f"⚠️ {sparse} records lack metadata; their prompts omit those clauses")
    if mismatched:
        logger.warning(f"⚠️ {mismatched} prompts do not parse back to their constraints")
    logger.info(f"✅ Wrote {len(rows)} prompts to {out}")
    return 0


def _train_texts(cfg: TrainRunConfig, crystals: Sequence[Crystal]) -> Dict[str, str]:
    if cfg.prompts:
        return {r.id: r.text for r in read_prompt_records(cfg.prompts)}
    return {c.id: make_short_prompt(_prompt_meta(c)) for c in crystals}


def cmd_train(cfg: TrainRunConfig) -> int:
    crystals = read_jsonl_dataset(_require(cfg.dataset, "--dataset"))
    out = Path(cfg.out or "model.ckpt")
    denoiser = cfg.denoiser

    if cfg.embeddings:
        table = load_external_embeddings(cfg.embeddings)
        text_vectors: Mapping[str, np.ndarray] = table
        text_encoder = None
        dim = table.dim
    else:
        encoder = HashTextEncoder(cfg.text_encoder)
        text_vectors = {key: encoder(text) for key, text in _train_texts(cfg, crystals).items()}
        text_encoder = cfg.text_encoder
        dim = encoder.dim
    if dim != denoiser.text_input_dim:
        logger.info(f"🔧 Text input dimension set to {dim}")
        denoiser = denoiser.model_copy(update={"text_input_dim": dim})

    trainer = Trainer(cfg.train, cfg.schedule, denoiser, text_encoder, show_progress=True)
    ckpt = trainer.train(crystals, text_vectors)
    ckpt.provenance = provenance("train", cfg, cfg.train.seed)
    save_checkpoint(ckpt, out)

    history_path = Path(cfg.history_csv) if cfg.history_csv else out.with_suffix(".history.csv")
    write_frame(pd.DataFrame(ckpt.loss_history), history_path, ckpt.provenance)
    logger.info(f"📝 Loss history written to {history_path}")
    _write_timings(_sidecar(out), {
        "epoch_seconds": trainer.epoch_seconds,
        "total_seconds": float(sum(trainer.epoch_seconds)),
    })
    return 0


def _sample_tasks(cfg: SampleRunConfig, records: Sequence[PromptRecordIn]) -> List[Tuple[PromptRecordIn, int, int]]:
    """(record, sample index, seed) in output order"""
    k = cfg.sampler.num_samples
    children = np.random.SeedSequence(cfg.seed).spawn(len(records) * k)
    return [
        (record, j, int(children[i * k + j].generate_state(1)[0]))
        for i, record in enumerate(records)
        for j in range(k)
    ]


def cmd_sample(cfg: SampleRunConfig) -> int:
    ckpt = load_checkpoint(_require(cfg.checkpoint, "--checkpoint"))
    records = read_prompt_records(_require(cfg.prompts, "--prompts"))
    out = Path(cfg.out or "samples.jsonl")
    mode = cfg.sampler.mode

    if ckpt.text_encoder is not None:
        encoder = HashTextEncoder(ckpt.text_encoder)
        vectors = {r.id: encoder(r.text) for r in records}
    else:
        table = load_external_embeddings(_require(cfg.embeddings, "--embeddings"))
        vectors = {r.id: table[r.id] for r in records}
    if mode == "csp":
        missing = [r.id for r in records if not r.atom_types]
        if missing:
            raise DataError(f"csp sampling needs atom_types on every prompt record; missing for {missing[:5]}")

    sampler = Sampler(ckpt, cfg.sampler)
    constraints = {r.id: try_parse_prompt(r.text) for r in records}

    def run(task: Tuple[PromptRecordIn, int, int]) -> Tuple[str, SampleResult]:
        record, j, seed = task
        sample_id = f"{record.id}-{j}"
        n_atoms = None if mode == "csp" else sampler.choose_num_atoms(constraints[record.id], seed)
        result = sampler.sample(
            vectors[record.id],
            n_atoms=n_atoms,
            fixed_types=record.atom_types if mode == "csp" else None,
            seed=seed,
            id=sample_id,
            meta=CrystalMeta(prompt_id=record.id, sample_index=j),
        )
        return sample_id, result

    tasks = _sample_tasks(cfg, records)
    started = time.perf_counter()
    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(task) for task in tasks]
    elapsed = time.perf_counter() - started

    crystals = [r.crystal for _, r in results if r.crystal is not None]
    flagged = [sid for sid, r in results if r.flagged_invalid]
    if flagged:
        logger.warning(f"⚠️ {len(flagged)} samples flagged invalid and left out")
    write_jsonl_dataset(crystals, out, provenance("sample", cfg, cfg.seed))
    step_counts = [len(r.step_seconds) for _, r in results]
    _write_timings(_sidecar(out), {
        "samples": {sid: r.seconds for sid, r in results},
        "total_seconds": elapsed,
        "mean_seconds_per_sample": float(np.mean([r.seconds for _, r in results])),
        "steps": int(max(step_counts)) if step_counts else 0,
        "flagged_invalid": flagged,
        "resampled_lattice": [sid for sid, r in results if r.resampled_lattice],
    })
    return 0


def _report_timings(path: Optional[str]) -> Dict[str, float]:
    """Numeric summary entries of a sampling timings file"""
    if not path:
        return {}
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (FileNotFoundError, json.JSONDecodeError) as e:
        raise DataError(f"Could not read timings file {path}: {e}")
    return {
        f"sampling.{key}": float(value)
        for key, value in payload.items()
        if isinstance(value, (int, float)) and not isinstance(value, bool)
    }


def cmd_evaluate(cfg: EvaluateRunConfig) -> int:
    gens = read_jsonl_dataset(_require(cfg.gens, "--gens"))
    refs = read_jsonl_dataset(cfg.refs) if cfg.refs else None
    prompts = None
    if cfg.prompts:
        parsed = {r.id: try_parse_prompt(r.text) for r in read_prompt_records(cfg.prompts)}
        prompts = {key: value for key, value in parsed.items() if value is not None}
    out = Path(cfg.out or "report.json")

    predictor = MetadataPropertyPredictor() if cfg.metadata_properties else None
    evaluator = Evaluator(cfg.matcher, cfg.coverage, predictor, cfg.jobs)
    report, phases = evaluator.evaluate(gens, refs, prompts)
    report = report.model_copy(update={
        "timings": _report_timings(cfg.timings),
        "provenance": provenance("evaluate", cfg, cfg.seed),
    })
    write_report(report, out, cfg.csv)
    _write_timings(_sidecar(out), phases)
    return 0


# ---------------------------------------------------------------- parser

def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run config")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--jobs", type=int, help="worker threads")
    parser.add_argument("--deterministic", action="store_true", default=None,
                        help="force deterministic torch kernels")
    parser.add_argument("--out", help="primary output path")
    parser.add_argument("--log-level", help="override LOG_LEVEL")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=TOOL_NAME, description="Text-conditioned crystal generation")
    parser.add_argument("--version", action="version", version=f"{TOOL_NAME} {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy", help="write a synthetic perovskite dataset")
    _common(p)
    p.add_argument("--num-structures", type=int)
    p.add_argument("--rattle", type=float)
    p.add_argument("--strain", type=float)
    p.add_argument("--split", action="store_true", default=None, help="write 60:20:20 train/val/test files")

    p = sub.add_parser("gen-prompts", help="write one short prompt per dataset record")
    _common(p)
    p.add_argument("dataset", nargs="?")

    p = sub.add_parser("train", help="train a denoiser")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--prompts")
    p.add_argument("--embeddings")
    p.add_argument("--history-csv")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--timesteps", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--num-layers", type=int)

    p = sub.add_parser("sample", help="sample crystals for prompts")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--prompts")
    p.add_argument("--embeddings")
    p.add_argument("--mode", choices=["gen", "csp"])
    p.add_argument("--num-samples", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--strategy", choices=["d3pm_ancestral", "alg2_softmax"])
    p.add_argument("--step-size", type=float)
    p.add_argument("--unconditional", action="store_true", default=None)

    p = sub.add_parser("evaluate", help="compute the metric report")
    _common(p)
    p.add_argument("--gens")
    p.add_argument("--refs")
    p.add_argument("--prompts")
    p.add_argument("--timings", help="sampling timings file to fold into the report")
    p.add_argument("--csv", help="also write the report as CSV")
    p.add_argument("--metadata-properties", action="store_true", default=None)
    return parser


def _shared_overrides(args: argparse.Namespace) -> Dict[Tuple[str, ...], Any]:
    return {
        ("seed",): args.seed,
        ("jobs",): args.jobs,
        ("deterministic",): args.deterministic,
        ("out",): args.out,
    }


def _overrides(args: argparse.Namespace) -> Dict[Tuple[str, ...], Any]:
    o = _shared_overrides(args)
    if args.command == "make-toy":
        o.update({("num_structures",): args.num_structures, ("rattle",): args.rattle,
                  ("strain",): args.strain, ("split",): args.split})
    elif args.command == "gen-prompts":
        o[("dataset",)] = args.dataset
    elif args.command == "train":
        o.update({
            ("dataset",): args.dataset,
            ("prompts",): args.prompts,
            ("embeddings",): args.embeddings,
            ("history_csv",): args.history_csv,
            ("train", "epochs"): args.epochs,
            ("train", "batch_size"): args.batch_size,
            ("train", "learning_rate"): args.lr,
            ("train", "seed"): args.seed,
            ("train", "deterministic"): args.deterministic,
            ("schedule", "timesteps"): args.timesteps,
            ("denoiser", "hidden_dim"): args.hidden_dim,
            ("denoiser", "num_layers"): args.num_layers,
            ("denoiser", "seed"): args.seed,
        })
    elif args.command == "sample":
        o.update({
            ("checkpoint",): args.checkpoint,
            ("prompts",): args.prompts,
            ("embeddings",): args.embeddings,
            ("sampler", "mode"): args.mode,
            ("sampler", "num_samples"): args.num_samples,
            ("sampler", "steps"): args.steps,
            ("sampler", "strategy"): args.strategy,
            ("sampler", "step_size"): args.step_size,
            ("sampler", "unconditional"): args.unconditional,
        })
    elif args.command == "evaluate":
        o.update({
            ("gens",): args.gens,
            ("refs",): args.refs,
            ("prompts",): args.prompts,
            ("timings",): args.timings,
            ("csv",): args.csv,
            ("metadata_properties",): args.metadata_properties,
        })
    return o


COMMANDS: Dict[str, Tuple[Type[BaseModel], Callable[[Any], int]]] = {
    "make-toy": (ToyRunConfig, cmd_make_toy),
    "gen-prompts": (GenPromptsRunConfig, cmd_gen_prompts),
    "train": (TrainRunConfig, cmd_train),
    "sample": (SampleRunConfig, cmd_sample),
    "evaluate": (EvaluateRunConfig, cmd_evaluate),
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command and return its exit code"""
    args = build_parser().parse_args(argv)
    setup_logging(level=args.log_level)
    if settings.TORCH_NUM_THREADS:
        torch.set_num_threads(settings.TORCH_NUM_THREADS)

    model, command = COMMANDS[args.command]
    try:
        cfg = load_run_config(model, args.config, _overrides(args))
        logger.info(f"🚀 {args.command} (seed {cfg.seed}, config {config_hash(cfg)[:12]})")
        return command(cfg)
    except TextCrystalException as e:
        logger.error(f"❌ {e.detail}")
        if settings.DEBUG:
            logger.exception("Traceback")
        return e.exit_code
    except Exception as e:
        logger.exception(f"❌ Unexpected failure: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
