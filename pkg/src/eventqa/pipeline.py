"""Experiment orchestration: staged training, evaluation, inference.

The build has three trained stages, all driven by one ExperimentConfig:

  1. encoder pretraining: embedder + causal encoder learn to predict every
     feature of the next event;
  2. text warm-up: the small language model is trained on a pure-text corpus
     of the answer vocabulary, then frozen (the stand-in for a pretrained
     backbone);
  3. end-to-end fine-tuning: connector, event-side components, delimiter
     rows, and low-rank adapters train while the frozen base answers
     templated questions about injected event sequences.

Every stage derives its randomness from the config seed, so (config, seed)
determines every artifact byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .checkpoint import atomic_write_text, load_checkpoint, save_checkpoint
from .codec import DatasetCodec, EventEmbedder
from .connector import Connector, ConnectorConfig
from .data import (Dataset, EventSequence, GeneratorConfig, Schema,
                   generate_synthetic, load_jsonl, save_jsonl, split_by_client)
from .encoder import EncoderConfig, EventEncoder, NextEventHeads, next_event_loss
from .errors import ConfigError, DataError, DivergenceError
from .lm import (EOS, PAD, LoraConfig, Tokenizer, ToyLm, ToyLmConfig,
                 apply_lora, set_lora_training)
from .metrics import EvalReport, TaskResult, score_task, statistical_baseline
from .optim import AdamW, LrSchedule
from .qa import (DEFAULT_PREFIX, QAPair, QATask, T_BINARY, Unparseable,
                 build_pair, build_tasks, corpus_word_inventory, derived_seed,
                 eligible, parse_answer)


@dataclass
class StageSchedule:
    epochs: int = 3
    batch_size: int = 32
    peak_lr: float = 3e-3
    min_lr: float = 0.0
    warmup_steps: int = 30
    cycle_length: int | None = None     # defaults to the post-warmup length
    restart_multiplier: float = 1.0

    def to_json(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size,
                "peak_lr": self.peak_lr, "min_lr": self.min_lr,
                "warmup_steps": self.warmup_steps,
                "cycle_length": self.cycle_length,
                "restart_multiplier": self.restart_multiplier}

    @classmethod
    def from_json(cls, d: dict) -> "StageSchedule":
        return cls(**d)

    def schedule(self, total_steps: int) -> LrSchedule:
        cycle = self.cycle_length or max(total_steps - self.warmup_steps, 1)
        return LrSchedule(peak_lr=self.peak_lr, min_lr=self.min_lr,
                          warmup_steps=min(self.warmup_steps, total_steps),
                          cycle_length=cycle,
                          restart_multiplier=self.restart_multiplier)


@dataclass
class ExperimentConfig:
    generator: GeneratorConfig
    tasks: list[dict]
    held_out_tasks: list[str] = field(default_factory=list)
    seed: int = 0
    val_fraction: float = 0.1
    min_seq_len: int = 2
    max_seq_len: int = 32
    integer_vocab_cap: int = 1000
    prefix: str = DEFAULT_PREFIX
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    connector: ConnectorConfig = field(default_factory=ConnectorConfig)
    lm: ToyLmConfig = field(default_factory=ToyLmConfig)
    lora: LoraConfig = field(default_factory=lambda: LoraConfig(rank=4, dropout=0.0))
    optimizer: dict = field(default_factory=lambda: {
        "beta1": 0.9, "beta2": 0.98, "eps": 1e-8, "weight_decay": 0.01,
        "clip_norm": 1.0})
    pretrain: StageSchedule = field(default_factory=StageSchedule)
    warmup: StageSchedule = field(default_factory=lambda: StageSchedule(
        epochs=30, batch_size=32, peak_lr=3e-3, warmup_steps=20))
    train: StageSchedule = field(default_factory=StageSchedule)
    eval_batch_size: int = 64

    def __post_init__(self):
        task_ids = [t["id"] for t in self.tasks]
        if len(set(task_ids)) != len(task_ids):
            raise ConfigError(f"duplicate task ids: {task_ids}")
        for held in self.held_out_tasks:
            if held not in task_ids:
                raise ConfigError(
                    f"held-out task {held!r} is not in the task list")
        if self.max_seq_len > self.encoder.max_positions:
            raise ConfigError(
                f"max_seq_len {self.max_seq_len} exceeds encoder max "
                f"positions {self.encoder.max_positions}")
        if self.max_seq_len > self.connector.max_events:
            raise ConfigError(
                f"max_seq_len {self.max_seq_len} exceeds connector "
                f"max_events {self.connector.max_events}")
        if self.min_seq_len < 1 or self.min_seq_len > self.max_seq_len:
            raise ConfigError("need 1 <= min_seq_len <= max_seq_len")
        if self.connector.d_out != self.lm.d_model:
            raise ConfigError(
                f"connector output width {self.connector.d_out} must equal "
                f"the language model width {self.lm.d_model}")
        if self.connector.d_enc != self.encoder.d_model:
            raise ConfigError(
                f"connector d_enc {self.connector.d_enc} must equal encoder "
                f"width {self.encoder.d_model}")

    def to_json(self) -> dict:
        return {
            "generator": self.generator.to_json(), "tasks": self.tasks,
            "held_out_tasks": self.held_out_tasks, "seed": self.seed,
            "val_fraction": self.val_fraction,
            "min_seq_len": self.min_seq_len, "max_seq_len": self.max_seq_len,
            "integer_vocab_cap": self.integer_vocab_cap, "prefix": self.prefix,
            "encoder": self.encoder.to_json(),
            "connector": self.connector.to_json(), "lm": self.lm.to_json(),
            "lora": self.lora.to_json(), "optimizer": self.optimizer,
            "pretrain": self.pretrain.to_json(), "warmup": self.warmup.to_json(),
            "train": self.train.to_json(),
            "eval_batch_size": self.eval_batch_size,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        try:
            return cls(
                generator=GeneratorConfig.from_json(d["generator"]),
                tasks=d["tasks"],
                held_out_tasks=d.get("held_out_tasks", []),
                seed=d.get("seed", 0),
                val_fraction=d.get("val_fraction", 0.1),
                min_seq_len=d.get("min_seq_len", 2),
                max_seq_len=d.get("max_seq_len", 32),
                integer_vocab_cap=d.get("integer_vocab_cap", 1000),
                prefix=d.get("prefix", DEFAULT_PREFIX),
                encoder=EncoderConfig.from_json(d["encoder"]) if "encoder" in d
                else EncoderConfig(),
                connector=ConnectorConfig.from_json(d["connector"])
                if "connector" in d else ConnectorConfig(),
                lm=ToyLmConfig.from_json(d["lm"]) if "lm" in d else ToyLmConfig(),
                lora=LoraConfig.from_json(d["lora"]) if "lora" in d
                else LoraConfig(rank=4, dropout=0.0),
                optimizer=d.get("optimizer", {
                    "beta1": 0.9, "beta2": 0.98, "eps": 1e-8,
                    "weight_decay": 0.01, "clip_norm": 1.0}),
                pretrain=StageSchedule.from_json(d["pretrain"])
                if "pretrain" in d else StageSchedule(),
                warmup=StageSchedule.from_json(d["warmup"]) if "warmup" in d
                else StageSchedule(epochs=30, batch_size=32, peak_lr=3e-3,
                                   warmup_steps=20),
                train=StageSchedule.from_json(d["train"]) if "train" in d
                else StageSchedule(),
                eval_batch_size=d.get("eval_batch_size", 64),
            )
        except KeyError as e:
            raise ConfigError(f"experiment config missing field {e.args[0]!r}") \
                from None

    def config_hash(self) -> str:
        """Hash of the configuration without the seed (seeds vary per run)."""
        payload = self.to_json()
        payload.pop("seed")
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def built_tasks(self) -> list[QATask]:
        return build_tasks(self.tasks)

    def trained_task_ids(self) -> list[str]:
        return [t["id"] for t in self.tasks
                if t["id"] not in self.held_out_tasks]


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read experiment config {path}: {e}") from None
    return ExperimentConfig.from_json(payload)


# ---------------------------------------------------------------------------
# model composition


class PipelineModel(nn.Module):
    """Embedder -> encoder -> connector -> injected language model."""

    def __init__(self, codec: DatasetCodec, tokenizer: Tokenizer,
                 config: ExperimentConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.codec = codec
        self.embedder = EventEmbedder(codec, rng)
        self.encoder = EventEncoder(codec.event_dim, config.encoder, rng)
        self.connector = Connector(config.connector, rng)
        self.lm = ToyLm(tokenizer, config.lm, rng)

    def event_queries(self, event_batch: dict[str, np.ndarray],
                      event_mask: np.ndarray) -> Tensor:
        embedded = self.embedder.embed_indices(event_batch)
        encoded = self.encoder.encode(embedded)
        return self.connector.forward(encoded, event_mask)


def load_params(module: nn.Module, tensors: dict[str, np.ndarray],
                prefix: str = "") -> None:
    for name, p in module.parameters().items():
        key = prefix + name
        if key not in tensors:
            raise ConfigError(f"checkpoint is missing tensor {key!r}")
        if tensors[key].shape != p.data.shape:
            raise ConfigError(
                f"checkpoint tensor {key!r} has shape {tensors[key].shape}, "
                f"model expects {p.data.shape}")
        p.data = tensors[key].copy()


# ---------------------------------------------------------------------------
# batching helpers


def admit_sequence(seq: EventSequence, task: QATask, min_len: int,
                   max_len: int) -> EventSequence | None:
    """Apply the visibility rule then the length policy (keep most recent)."""
    if not eligible(task, seq):
        return None
    visible = task.visible_sequence(seq)
    if len(visible) < min_len:
        return None
    return visible.tail(max_len)


@dataclass
class QABatch:
    pairs: list[QAPair]
    event_batch: dict[str, np.ndarray]
    event_mask: np.ndarray
    prefix_ids: np.ndarray
    body_ids: np.ndarray
    body_valid: np.ndarray
    answer_ids: np.ndarray
    answer_valid: np.ndarray


def make_qa_batch(pairs: list[QAPair], sequences: dict[str, EventSequence],
                  tasks: dict[str, QATask], codec: DatasetCodec,
                  tokenizer: Tokenizer, config: ExperimentConfig) -> QABatch:
    visible = []
    for p in pairs:
        task = tasks[p.task_id]
        seq = admit_sequence(sequences[p.client_id], task,
                             config.min_seq_len, config.max_seq_len)
        if seq is None:
            raise DataError(
                f"pair for client {p.client_id!r} violates the length policy")
        visible.append(seq)
    event_batch, event_mask = codec.encode_batch(visible)

    prefix_tok = tokenizer.tokenize(pairs[0].prefix)
    for p in pairs:
        if p.prefix != pairs[0].prefix:
            raise ConfigError("mixed prefixes in one batch are unsupported")
    prefix_ids = np.tile(np.asarray(prefix_tok, dtype=np.int64),
                         (len(pairs), 1))

    bodies = [tokenizer.tokenize(p.body) for p in pairs]
    t_body = max(len(b) for b in bodies)
    body_ids = np.full((len(pairs), t_body), PAD, dtype=np.int64)
    body_valid = np.zeros((len(pairs), t_body))
    for i, b in enumerate(bodies):
        body_ids[i, :len(b)] = b
        body_valid[i, :len(b)] = 1.0

    answers = [tokenizer.tokenize(p.answer) + [EOS] for p in pairs]
    t_ans = max(len(a) for a in answers)
    answer_ids = np.full((len(pairs), t_ans), PAD, dtype=np.int64)
    answer_valid = np.zeros((len(pairs), t_ans))
    for i, a in enumerate(answers):
        answer_ids[i, :len(a)] = a
        answer_valid[i, :len(a)] = 1.0

    return QABatch(pairs, event_batch, event_mask, prefix_ids, body_ids,
                   body_valid, answer_ids, answer_valid)


def qa_loss(model: PipelineModel, batch: QABatch) -> Tensor:
    queries = model.event_queries(batch.event_batch, batch.event_mask)
    mm = model.lm.batch_inputs(batch.prefix_ids, batch.body_ids,
                               batch.body_valid, queries)
    return model.lm.answer_loss(mm, batch.answer_ids, batch.answer_valid)


def _chunks(items: list, size: int):
    for i in range(0, len(items), size):
        yield items[i:i + size]


# ---------------------------------------------------------------------------
# generic training loop


def run_training(loss_fn, params: dict[str, Tensor], stage: StageSchedule,
                 n_batches_per_epoch: int, batch_provider, optimizer_cfg: dict,
                 start_step: int = 0, optimizer: AdamW | None = None,
                 log_every: int = 10) -> tuple[AdamW, list[tuple[int, float, float]]]:
    """Drive AdamW over the stage's epochs; returns (optimizer, loss curve).

    ``batch_provider(epoch, index)`` yields whatever ``loss_fn`` consumes.
    Raises DivergenceError on a non-finite loss, reporting the step.
    """
    total_steps = stage.epochs * n_batches_per_epoch
    schedule = stage.schedule(total_steps)
    if optimizer is None:
        optimizer = AdamW(
            params, beta1=optimizer_cfg.get("beta1", 0.9),
            beta2=optimizer_cfg.get("beta2", 0.98),
            eps=optimizer_cfg.get("eps", 1e-8),
            weight_decay=optimizer_cfg.get("weight_decay", 0.01))
    clip = optimizer_cfg.get("clip_norm", 0.0)
    curve: list[tuple[int, float, float]] = []
    step = start_step
    start_epoch = start_step // n_batches_per_epoch
    for epoch in range(start_epoch, stage.epochs):
        for index in range(n_batches_per_epoch):
            if epoch * n_batches_per_epoch + index < start_step:
                continue
            batch = batch_provider(epoch, index)
            optimizer.zero_grad()
            loss = loss_fn(batch)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(step, value)
            ad.backward(loss)
            if clip:
                optimizer.clip_grad_norm(clip)
            lr = schedule.lr_at(step)
            optimizer.step(lr)
            curve.append((step, lr, value))
            step += 1
    return optimizer, curve


def curve_to_csv(curve: list[tuple[int, float, float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["step", "lr", "loss"])
    for step, lr, value in curve:
        writer.writerow([step, f"{lr:.8g}", f"{value:.8g}"])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# stage: data


def generate_data(config: ExperimentConfig, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset, provenance = generate_synthetic(config.generator, config.seed)
    save_jsonl(dataset, out / "dataset.jsonl")
    provenance["config_hash"] = config.config_hash()
    atomic_write_text(out / "provenance.json",
                      json.dumps(provenance, indent=2, sort_keys=True) + "\n")
    atomic_write_text(out / "schema.json",
                      json.dumps(dataset.schema.to_json(), indent=2) + "\n")
    return {"n_clients": len(dataset), "path": str(out / "dataset.jsonl")}


def load_splits(config: ExperimentConfig,
                data_dir: str | Path | None = None
                ) -> tuple[Dataset, Dataset, Dataset]:
    """(full, train, val); regenerates deterministically when no dir given."""
    if data_dir is not None:
        schema = Schema.from_json(
            json.loads((Path(data_dir) / "schema.json").read_text()))
        dataset = load_jsonl(Path(data_dir) / "dataset.jsonl", schema)
    else:
        dataset, _ = generate_synthetic(config.generator, config.seed)
    train, val = split_by_client(dataset, config.val_fraction,
                                 derived_seed(config.seed, "split"))
    return dataset, train, val


# ---------------------------------------------------------------------------
# stage: codec


def fit_codec_stage(config: ExperimentConfig, train: Dataset) -> DatasetCodec:
    return DatasetCodec.fit(train, integer_vocab_cap=config.integer_vocab_cap)


# ---------------------------------------------------------------------------
# stage: encoder pretraining


def pretrain_encoder_stage(config: ExperimentConfig, train: Dataset,
                           codec: DatasetCodec, out_dir: str | Path,
                           resume: bool = False) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(derived_seed(config.seed, "pretrain"))
    embedder = EventEmbedder(codec, rng)
    encoder = EventEncoder(codec.event_dim, config.encoder, rng)
    heads = NextEventHeads(codec, config.encoder.d_model, rng)

    usable = [s.tail(config.max_seq_len) for s in train.sequences if len(s) >= 2]
    skipped = len(train.sequences) - len(usable)
    if not usable:
        raise DataError("no sequences with at least 2 events to pretrain on")
    stage = config.pretrain
    n_batches = max(1, len(usable) // stage.batch_size)

    params = {}
    params.update(embedder.parameters("embedder."))
    params.update(encoder.parameters("encoder."))
    params.update(heads.parameters("heads."))

    start_step = 0
    optimizer = AdamW(params, **{k: v for k, v in config.optimizer.items()
                                 if k in ("beta1", "beta2", "eps", "weight_decay")})
    prior_curve: list[tuple[int, float, float]] = []
    ckpt_base = out / "encoder"
    if resume:
        tensors, sidecar = load_checkpoint(ckpt_base)
        if sidecar.get("encoder") != config.encoder.to_json():
            raise ConfigError(
                "resume checkpoint was built from a different encoder config")
        for name, module in (("embedder.", embedder), ("encoder.", encoder),
                             ("heads.", heads)):
            load_params(module, tensors, prefix=name)
        optimizer.load_state_tensors(tensors, sidecar["step"])
        start_step = sidecar["step"]
        curve_path = out / "pretrain_loss.csv"
        if curve_path.exists():
            with curve_path.open() as fh:
                reader = csv.reader(fh)
                next(reader)
                prior_curve = [(int(r[0]), float(r[1]), float(r[2]))
                               for r in reader]

    order_rng = np.random.default_rng(derived_seed(config.seed, "pretrain-order"))
    epoch_orders = [order_rng.permutation(len(usable))
                    for _ in range(stage.epochs)]

    def provider(epoch: int, index: int):
        chosen = epoch_orders[epoch][index * stage.batch_size:
                                     (index + 1) * stage.batch_size]
        return codec.encode_batch([usable[i] for i in chosen])

    def loss_fn(batch):
        event_batch, mask = batch
        loss, _ = next_event_loss(encoder, heads, embedder, event_batch, mask)
        return loss

    optimizer, curve = run_training(
        loss_fn, params, stage, n_batches, provider, config.optimizer,
        start_step=start_step, optimizer=optimizer)

    full_curve = prior_curve + curve
    tensors = {name: p.data for name, p in params.items()}
    tensors.update(optimizer.state_tensors())
    sidecar = {
        "stage": "pretrain-encoder",
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "step": start_step + len(curve),
        "skipped_short_sequences": skipped,
        "encoder": config.encoder.to_json(),
        "schedule": stage.schedule(stage.epochs * n_batches).to_json(),
        "optimizer": optimizer.hyperparams(),
    }
    save_checkpoint(ckpt_base, tensors, sidecar)
    atomic_write_text(out / "pretrain_loss.csv", curve_to_csv(full_curve))
    first = full_curve[0][2] if full_curve else float("nan")
    last = full_curve[-1][2] if full_curve else float("nan")
    return {"initial_loss": first, "final_loss": last,
            "steps": len(full_curve), "checkpoint": str(ckpt_base)}


# ---------------------------------------------------------------------------
# stage: language-model warm-up


def warmup_corpus(tokenizer: Tokenizer, prefix: str) -> list[tuple[str, str]]:
    """Pure-text items over the answer vocabulary: echo drills plus Yes/No
    calibration, teaching the decoder to emit every answer token."""
    items: list[tuple[str, str]] = []
    for token in tokenizer.tokens[5:]:
        if token.isalpha() and token not in ("Yes", "No"):
            items.append((f"Repeat the word {token}.", token))
    for digit in "0123456789":
        items.append((f"Repeat the number {digit}.", digit))
    items.append(("Repeat the number 42.", "42"))
    items.append(("Repeat the number 3.5.", "3.5"))
    items.append(("Answer yes.", "Yes"))
    items.append(("Answer no.", "No"))
    return items


def build_tokenizer(config: ExperimentConfig, codec: DatasetCodec) -> Tokenizer:
    words = corpus_word_inventory(codec, config.built_tasks(),
                                  prefix=config.prefix)
    words.extend(["Repeat", "the", "word", "number", "Answer", "yes", "no"])
    return Tokenizer.build(words)


def warmup_lm_stage(config: ExperimentConfig, codec: DatasetCodec,
                    out_dir: str | Path) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tokenizer = build_tokenizer(config, codec)
    rng = np.random.default_rng(derived_seed(config.seed, "warmup"))
    lm = ToyLm(tokenizer, config.lm, rng)

    items = warmup_corpus(tokenizer, config.prefix)
    stage = config.warmup
    n_batches = max(1, math.ceil(len(items) / stage.batch_size))
    order_rng = np.random.default_rng(derived_seed(config.seed, "warmup-order"))
    epoch_orders = [order_rng.permutation(len(items))
                    for _ in range(stage.epochs)]

    def provider(epoch: int, index: int):
        chosen = epoch_orders[epoch][index * stage.batch_size:
                                     (index + 1) * stage.batch_size]
        chosen = [items[i] for i in chosen]
        bodies = [tokenizer.tokenize(body) for body, _ in chosen]
        answers = [tokenizer.tokenize(ans) + [EOS] for _, ans in chosen]
        prefix_tok = tokenizer.tokenize(config.prefix)
        b = len(chosen)
        prefix_ids = np.tile(np.asarray(prefix_tok, dtype=np.int64), (b, 1))
        t_body = max(len(x) for x in bodies)
        body_ids = np.full((b, t_body), PAD, dtype=np.int64)
        body_valid = np.zeros((b, t_body))
        for i, x in enumerate(bodies):
            body_ids[i, :len(x)] = x
            body_valid[i, :len(x)] = 1.0
        t_ans = max(len(x) for x in answers)
        answer_ids = np.full((b, t_ans), PAD, dtype=np.int64)
        answer_valid = np.zeros((b, t_ans))
        for i, x in enumerate(answers):
            answer_ids[i, :len(x)] = x
            answer_valid[i, :len(x)] = 1.0
        return prefix_ids, body_ids, body_valid, answer_ids, answer_valid

    params = lm.parameters("lm.")

    def loss_fn(batch):
        prefix_ids, body_ids, body_valid, answer_ids, answer_valid = batch
        mm = lm.batch_inputs(prefix_ids, body_ids, body_valid, None)
        return lm.answer_loss(mm, answer_ids, answer_valid)

    _, curve = run_training(loss_fn, params, stage, n_batches, provider,
                            config.optimizer)

    tensors = {name: p.data for name, p in params.items()}
    sidecar = {
        "stage": "warmup-lm",
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "lm": config.lm.to_json(),
        "tokenizer": tokenizer.to_json(),
        "schedule": stage.schedule(stage.epochs * n_batches).to_json(),
        "final_loss": curve[-1][2] if curve else None,
    }
    save_checkpoint(out / "lm_base", tensors, sidecar)
    atomic_write_text(out / "warmup_loss.csv", curve_to_csv(curve))
    return {"final_loss": curve[-1][2] if curve else None,
            "vocab_size": tokenizer.size, "checkpoint": str(out / "lm_base")}


# ---------------------------------------------------------------------------
# stage: end-to-end fine-tuning


def train_stage(config: ExperimentConfig, train: Dataset, val: Dataset,
                codec: DatasetCodec, out_dir: str | Path,
                from_scratch_encoder: bool = False) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    lm_tensors, lm_sidecar = load_checkpoint(out / "lm_base")
    if lm_sidecar.get("config_hash") != config.config_hash():
        raise ConfigError("language model checkpoint does not match this config")
    tokenizer = Tokenizer.from_json(lm_sidecar["tokenizer"])

    rng = np.random.default_rng(derived_seed(config.seed, "train"))
    model = PipelineModel(codec, tokenizer, config, rng)
    load_params(model.lm, lm_tensors, prefix="lm.")

    if not from_scratch_encoder:
        enc_tensors, enc_sidecar = load_checkpoint(out / "encoder")
        if enc_sidecar.get("config_hash") != config.config_hash():
            raise ConfigError("encoder checkpoint does not match this config")
        load_params(model.embedder, enc_tensors, prefix="embedder.")
        load_params(model.encoder, enc_tensors, prefix="encoder.")

    # freeze the warmed-up backbone; only adapters and delimiters stay live
    lora_rng = np.random.default_rng(derived_seed(config.seed, "lora"))
    lora_report = apply_lora(model.lm, config.lora, lora_rng)
    base_frozen_names = sorted(
        name for name, p in model.lm.parameters("lm.").items()
        if not p.requires_grad)
    base_hash_before = _hash_named(model.lm, base_frozen_names)

    tasks = {t.task_id: t for t in config.built_tasks()}
    trained_tasks = [tasks[i] for i in config.trained_task_ids()]
    if not trained_tasks:
        raise ConfigError("no tasks remain after removing the held-out set")

    sequences = {s.client_id: s for s in train.sequences}
    corpus_seed = derived_seed(config.seed, "corpus")
    pairs: list[QAPair] = []
    for seq in train.sequences:
        for task in trained_tasks:
            if admit_sequence(seq, task, config.min_seq_len,
                              config.max_seq_len) is None:
                continue
            pairs.append(build_pair(task, seq, codec, corpus_seed,
                                    prefix=config.prefix))
    if not pairs:
        raise DataError("no usable training pairs under the length policy")

    stage = config.train
    n_batches = max(1, len(pairs) // stage.batch_size)
    order_rng = np.random.default_rng(derived_seed(config.seed, "train-order"))
    epoch_orders = [order_rng.permutation(len(pairs))
                    for _ in range(stage.epochs)]

    def provider(epoch: int, index: int):
        chosen = epoch_orders[epoch][index * stage.batch_size:
                                     (index + 1) * stage.batch_size]
        return make_qa_batch([pairs[i] for i in chosen], sequences, tasks,
                             codec, tokenizer, config)

    set_lora_training(model.lm, True)
    params = model.trainable_parameters()
    _, curve = run_training(lambda b: qa_loss(model, b), params, stage,
                            n_batches, provider, config.optimizer)
    set_lora_training(model.lm, False)

    base_hash_after = _hash_named(model.lm, base_frozen_names)
    if base_hash_after != base_hash_before:
        raise RuntimeError(
            "fine-tuning modified a frozen language model tensor")

    # answer-format validity on the validation split (trained tasks)
    parse_stats = _parseable_rate(model, val, trained_tasks, codec, config)

    all_params = model.parameters()
    tensors = {name: p.data for name, p in all_params.items()}
    sidecar = {
        "stage": "train",
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "config": config.to_json(),
        "tokenizer": tokenizer.to_json(),
        "manifest": {
            "trained_tasks": sorted(t.task_id for t in trained_tasks),
            "held_out_tasks": sorted(config.held_out_tasks),
        },
        "frozen": base_frozen_names,
        "lora_report": {k: v for k, v in lora_report.items()
                        if k != "adapted_matrices"},
        "final_loss": curve[-1][2] if curve else None,
        "val_parseable_rate": parse_stats["rate"],
        "schedule": stage.schedule(stage.epochs * n_batches).to_json(),
    }
    codec.save(out / "codec.json")
    save_checkpoint(out / "pipeline", tensors, sidecar)
    atomic_write_text(out / "train_loss.csv", curve_to_csv(curve))
    return {"final_loss": curve[-1][2] if curve else None,
            "val_parseable_rate": parse_stats["rate"],
            "frozen_hash_before": base_hash_before,
            "frozen_hash_after": base_hash_after,
            "frozen_base_unchanged": base_hash_after == base_hash_before,
            "lora_report": lora_report,
            "checkpoint": str(out / "pipeline")}


def _hash_named(module: nn.Module, names: list[str]) -> str:
    params = module.parameters("lm.")
    h = hashlib.sha256()
    for name in names:
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


def _parseable_rate(model: PipelineModel, val: Dataset, tasks: list[QATask],
                    codec: DatasetCodec, config: ExperimentConfig) -> dict:
    pairs, _, texts, _ = run_inference(model, val, tasks, codec, config)
    task_map = {t.task_id: t for t in tasks}
    n_ok = 0
    for pair, text in zip(pairs, texts):
        task = task_map[pair.task_id]
        parsed = parse_answer(text, task, vocabulary=_task_vocab(task, codec))
        if not isinstance(parsed, Unparseable):
            n_ok += 1
    return {"rate": n_ok / len(pairs) if pairs else 0.0, "n": len(pairs)}


def _task_vocab(task: QATask, codec: DatasetCodec) -> list | None:
    if task.feature is None:
        return None
    fc = codec[task.feature]
    return list(fc.vocab.values) if fc.vocab is not None else None


# ---------------------------------------------------------------------------
# inference and evaluation


def run_inference(model: PipelineModel, dataset: Dataset, tasks: list[QATask],
                  codec: DatasetCodec, config: ExperimentConfig,
                  seed: int | None = None
                  ) -> tuple[list[QAPair], list[EventSequence], list[str],
                             list[float]]:
    """Generate answers for every (sequence, task) pair in the dataset.

    Returns (pairs, visible sequences, generated texts, binary scores);
    scores are p(Yes)-p(No) at the first decoding position (0.0 when the
    pair's task is not binary).
    """
    tokenizer = model.lm.tokenizer
    task_map = {t.task_id: t for t in tasks}
    corpus_seed = derived_seed(seed if seed is not None else config.seed,
                               "corpus")
    pairs = []
    for seq in dataset.sequences:
        for task in tasks:
            if admit_sequence(seq, task, config.min_seq_len,
                              config.max_seq_len) is None:
                continue
            pairs.append(build_pair(task, seq, codec, corpus_seed,
                                    prefix=config.prefix))
    sequences = {s.client_id: s for s in dataset.sequences}
    texts: list[str] = []
    scores: list[float] = []
    for chunk in _chunks(pairs, config.eval_batch_size):
        batch = make_qa_batch(chunk, sequences, task_map, codec, tokenizer,
                              config)
        with ad.no_grad():
            queries = model.event_queries(batch.event_batch, batch.event_mask)
            mm = model.lm.batch_inputs(batch.prefix_ids, batch.body_ids,
                                       batch.body_valid, queries)
            chunk_texts, steps = model.lm.generate(mm)
        first = steps[0] if steps else np.zeros((len(chunk), tokenizer.size))
        chunk_scores = first[:, tokenizer.yes_id] - first[:, tokenizer.no_id]
        texts.extend(chunk_texts)
        scores.extend(float(s) for s in chunk_scores)
    return pairs, [sequences[p.client_id] for p in pairs], texts, scores


def load_pipeline(out_dir: str | Path) -> tuple[PipelineModel, ExperimentConfig,
                                                DatasetCodec, dict]:
    out = Path(out_dir)
    tensors, sidecar = load_checkpoint(out / "pipeline")
    config = ExperimentConfig.from_json(sidecar["config"])
    codec = DatasetCodec.load(out / "codec.json")
    tokenizer = Tokenizer.from_json(sidecar["tokenizer"])
    rng = np.random.default_rng(derived_seed(config.seed, "train"))
    model = PipelineModel(codec, tokenizer, config, rng)
    apply_lora(model.lm, config.lora,
               np.random.default_rng(derived_seed(config.seed, "lora")))
    set_lora_training(model.lm, False)
    load_params(model, tensors)
    return model, config, codec, sidecar


def evaluate_stage(out_dir: str | Path, dataset: Dataset,
                   task_ids: list[str] | None = None,
                   zero_shot: bool = False,
                   train_split: Dataset | None = None) -> EvalReport:
    """Score a trained pipeline on a dataset, with baseline columns.

    With ``zero_shot``, every requested task must be in the checkpoint's
    held-out set; asking for a trained task is a protocol violation and is
    rejected.
    """
    model, config, codec, sidecar = load_pipeline(out_dir)
    manifest = sidecar["manifest"]
    all_tasks = {t.task_id: t for t in config.built_tasks()}
    if task_ids is None:
        task_ids = (manifest["held_out_tasks"] if zero_shot
                    else manifest["trained_tasks"])
    unknown = [t for t in task_ids if t not in all_tasks]
    if unknown:
        raise ConfigError(f"unknown task ids: {unknown}")
    if zero_shot:
        trained = set(manifest["trained_tasks"])
        bad = [t for t in task_ids if t in trained]
        if bad:
            raise ConfigError(
                f"zero-shot protocol violation: tasks {bad} were in the "
                f"training corpus manifest")
        missing = [t for t in task_ids
                   if t not in set(manifest["held_out_tasks"])]
        if missing:
            raise ConfigError(
                f"zero-shot tasks {missing} are not in the held-out set")
    tasks = [all_tasks[t] for t in task_ids]

    pairs, _, texts, scores = run_inference(model, dataset, tasks, codec,
                                            config)
    report = EvalReport(seed=config.seed, checkpoint_id=config.config_hash(),
                        zero_shot=zero_shot)
    for task in tasks:
        idx = [i for i, p in enumerate(pairs) if p.task_id == task.task_id]
        if not idx:
            continue
        vocab = _task_vocab(task, codec)
        parsed = [parse_answer(texts[i], task, vocabulary=vocab) for i in idx]
        truths = [pairs[i].truth for i in idx]
        task_scores = [scores[i] for i in idx] \
            if task.truth_type == T_BINARY else None
        metrics, n_unparseable = score_task(task, parsed, truths, task_scores)

        baselines: dict = {}
        if train_split is not None:
            predictors = statistical_baseline(
                task, train_split, codec, seed=derived_seed(config.seed,
                                                            "corpus"))
            for kind, predictor in predictors.items():
                base_preds = [predictor.predict(None) for _ in idx]
                base_metrics, _ = score_task(task, base_preds, truths, None)
                for m_name, m_value in base_metrics.items():
                    key = m_name if kind == "mode" else f"{m_name}_{kind}"
                    if m_value is not None:
                        baselines[key] = m_value

        report.tasks.append(TaskResult(
            task_id=task.task_id, metrics=metrics, baselines=baselines,
            n_total=len(idx), n_unparseable=n_unparseable))
    return report


# ---------------------------------------------------------------------------
# single-question inference


def _template_regex(task: QATask) -> "re.Pattern":
    import re as _re
    fields = {
        "feature": _re.escape(task.feature) if task.feature else "",
        "target": _re.escape(task.target) if task.target else "",
        "value": "(?P<value>.+?)",
        "options": "(?P<options>.+?)",
    }
    escaped = _re.escape(task.template)
    for name, repl in fields.items():
        escaped = escaped.replace(_re.escape("{%s}" % name), repl)
    suffix = f"(?:\\s+{_re.escape(task.instruction)})?" if task.instruction else ""
    return _re.compile(f"^{escaped}{suffix}$")


def match_question(question: str, tasks: list[QATask]) -> tuple[QATask, dict]:
    """Find the template family a free-text question instantiates."""
    question = question.strip()
    for task in tasks:
        m = _template_regex(task).match(question)
        if m:
            return task, {k: v for k, v in m.groupdict().items()
                          if v is not None}
    templates = "\n".join(
        f"  {t.task_id}: {t.template}" for t in tasks)
    raise ConfigError(
        f"question does not match any registered template. Known templates:\n"
        f"{templates}")


def ask(out_dir: str | Path, sequence_path: str | Path,
        question: str) -> dict:
    """One-shot inference: answer a templated question about one sequence."""
    model, config, codec, sidecar = load_pipeline(out_dir)
    tasks = config.built_tasks()
    task, raw_slots = match_question(question, tasks)

    dataset = load_jsonl(sequence_path, codec.schema)
    if not dataset.sequences:
        raise DataError(f"no sequences in {sequence_path}")
    seq = dataset.sequences[0]
    visible = admit_sequence(seq, task, config.min_seq_len, config.max_seq_len)
    if visible is None:
        raise DataError(
            f"sequence of {len(seq)} events violates the length policy "
            f"[{config.min_seq_len}, {config.max_seq_len}] for this task")

    slots = dict(raw_slots)
    if "value" in slots and task.feature is not None:
        vocab = _task_vocab(task, codec) or []
        for v in vocab:
            if str(v) == slots["value"]:
                slots["value"] = v
                break

    with ad.no_grad():
        event_batch, event_mask = codec.encode_batch([visible])
        queries = model.event_queries(event_batch, event_mask)
        single = ad.reshape(queries, queries.shape[1:])
        mm = model.lm.inject(config.prefix, question, single)
        texts, steps = model.lm.generate(mm)
    text = texts[0]
    parsed = parse_answer(text, task, vocabulary=_task_vocab(task, codec))
    result = {
        "task": task.task_id,
        "question": question,
        "generation": text,
        "parsed": None if isinstance(parsed, Unparseable) else parsed,
        "unparseable_reason": parsed.reason if isinstance(parsed, Unparseable)
        else None,
    }
    if task.truth_type == T_BINARY and steps:
        tok = model.lm.tokenizer
        result["score"] = float(steps[0][0, tok.yes_id] - steps[0][0, tok.no_id])
    return result
