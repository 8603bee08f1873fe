"""Toy two-tower encoder with parameter-efficient fine-tuning strategies.

Both towers share one architecture: tokens are embedded into a hidden space,
a frozen leading token is prepended, ``num_blocks`` single-head residual
attention blocks are applied, tokens are mean-pooled and a final projector
maps to the shared embedding space.  Images are single-token sequences,
class prompts are ``ctx_len`` context tokens followed by one class token.

The input embedding and projector of the two towers start from identical
values (separate tensors), standing in for contrastive pre-training; the
attention blocks are drawn independently per tower so the towers disagree
slightly, which is what leaves zero-shot predictions imperfect.

Weights follow the ``(out, in)`` convention and act on row vectors, so a
linear layer is ``h @ W.T``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor
from .errors import ConfigurationError, ContractError, DimensionError

STRATEGIES = ("lora", "lvp", "prompt", "frozen")
TOWERS = ("vision", "text")
LORA_TARGETS = ("q", "k", "v")


@dataclass(frozen=True)
class TowerConfig:
    input_dim: int = 16
    hidden_dim: int = 16
    embed_dim: int = 16
    num_blocks: int = 2
    seed: int = 0
    ctx_len: int = 4
    # std multiplier of the residual branches; sets how far the towers drift
    # from each other
    block_scale: float = 0.2

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "embed_dim", "num_blocks"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.ctx_len < 0:
            raise ConfigurationError("ctx_len must be >= 0")


@dataclass
class LoraAdapter:
    """Low-rank update ``gamma * B @ A`` patched onto frozen weight ``target``."""

    target: str
    A: Tensor
    B: Tensor
    rank: int
    gamma: float
    dropout_p: float = 0.0

    @classmethod
    def create(cls, target: str, weight: Tensor, rank: int, rng: Rng,
               gamma: float | None = None, dropout_p: float = 0.25) -> "LoraAdapter":
        m, n = weight.shape
        if rank < 1 or rank >= min(m, n):
            raise ConfigurationError(
                f"LoRA rank {rank} must satisfy 1 <= r < min({m}, {n}) for {target}")
        if not 0.0 <= dropout_p < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {dropout_p}")
        gamma = 1.0 / rank if gamma is None else float(gamma)
        if gamma < 0:
            raise ConfigurationError("gamma must be nonnegative")
        A = ad.kaiming_normal(rng, (rank, n), name=f"{target}.lora_A")
        B = Tensor(np.zeros((m, rank)), requires_grad=True, name=f"{target}.lora_B")
        return cls(target, A, B, rank, gamma, dropout_p)

    def metadata(self) -> dict:
        return {"target": self.target, "rank": self.rank, "gamma": self.gamma,
                "dropout_p": self.dropout_p}


@dataclass
class PromptBank:
    """Per-class learnable context vectors in front of frozen class tokens."""

    context: Tensor          # (K, ctx_len, input_dim), trainable
    class_tokens: np.ndarray  # (K, input_dim), frozen

    @property
    def num_classes(self) -> int:
        return self.class_tokens.shape[0]

    def sequences(self) -> Tensor:
        cls_tok = Tensor(self.class_tokens[:, None, :])
        return ad.concat([self.context, cls_tok], axis=1)


def lora_forward(h_prev: Tensor, W: Tensor, adapter: LoraAdapter | None = None,
                 training: bool = False, rng: Rng | None = None) -> Tensor:
    """``h W^T + gamma * dropout(h) A^T B^T``; the dropout only feeds the adapter."""
    if h_prev.shape[-1] != W.shape[1]:
        raise DimensionError(f"lora_forward: input {h_prev.shape} vs weight {W.shape}")
    out = ad.matmul(h_prev, ad.transpose(W))
    if adapter is None:
        return out
    x = h_prev
    p = adapter.dropout_p
    if training and p > 0.0:
        if rng is None:
            raise ContractError("dropout in training mode needs an rng")
        keep = rng.uniform(h_prev.shape) >= p
        x = ad.mul(x, Tensor(keep / (1.0 - p)))
    delta = ad.matmul(ad.matmul(x, ad.transpose(adapter.A)), ad.transpose(adapter.B))
    return ad.add(out, ad.scale(delta, adapter.gamma))


class TwoTowerModel:
    """Vision tower, text tower, adapters and the trainable mask."""

    def __init__(self, config: TowerConfig, strategy: str, tau: float = 0.01):
        self.config = config
        self.strategy = strategy
        self.tau = float(tau)
        self.params: dict[str, Tensor] = {}
        self.adapters: dict[str, LoraAdapter] = {}
        self.prompts: PromptBank | None = None
        self.training = False
        self.dropout_rng: Rng | None = None

    # -- mode / parameter bookkeeping -----------------------------------------
    def train(self, rng: Rng | None = None) -> "TwoTowerModel":
        self.training = True
        if rng is not None:
            self.dropout_rng = rng
        return self

    def eval(self) -> "TwoTowerModel":
        self.training = False
        return self

    def named_tensors(self) -> dict[str, Tensor]:
        out = dict(self.params)
        for ada in self.adapters.values():
            out[ada.A.name] = ada.A
            out[ada.B.name] = ada.B
        if self.prompts is not None:
            out["text.prompt_context"] = self.prompts.context
        return out

    @property
    def trainable_mask(self) -> dict[str, bool]:
        return {k: t.requires_grad for k, t in self.named_tensors().items()}

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(k, t) for k, t in self.named_tensors().items() if t.requires_grad]

    def zero_grad(self) -> None:
        for _, t in self.trainable():
            t.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_tensors().items()}

    # -- forward -----------------------------------------------------------------
    def _linear(self, x: Tensor, name: str) -> Tensor:
        return lora_forward(x, self.params[name], self.adapters.get(name),
                            self.training, self.dropout_rng)

    def _tower(self, tower: str, tokens: Tensor) -> Tensor:
        cfg = self.config
        batch = tokens.shape[0]
        x = ad.matmul(tokens, ad.transpose(self.params[f"{tower}.embed"]))
        # the leading token is never trainable
        lead = Tensor(np.broadcast_to(self.params[f"{tower}.lead"].data, (batch, 1, cfg.hidden_dim)))
        x = ad.concat([lead, x], axis=1)
        inv_sqrt = 1.0 / np.sqrt(cfg.hidden_dim)
        for b in range(cfg.num_blocks):
            pre = f"{tower}.block{b}"
            q = self._linear(x, f"{pre}.q")
            k = self._linear(x, f"{pre}.k")
            v = self._linear(x, f"{pre}.v")
            att = ad.softmax_rows(ad.scale(ad.matmul(q, ad.transpose(k)), inv_sqrt))
            x = ad.add(x, self._linear(ad.matmul(att, v), f"{pre}.out"))
            hid = ad.tanh(self._linear(x, f"{pre}.ff1"))
            x = ad.add(x, self._linear(hid, f"{pre}.ff2"))
        pooled = ad.mean(x, axis=1)
        return ad.l2_normalize_rows(ad.matmul(pooled, ad.transpose(self.params[f"{tower}.proj"])))

    def encode_images(self, images) -> Tensor:
        images = images if isinstance(images, Tensor) else Tensor(images)
        if images.ndim != 2 or images.shape[1] != self.config.input_dim:
            raise DimensionError(
                f"images must be (n, {self.config.input_dim}), got {images.shape}")
        tokens = ad.reshape(images, (images.shape[0], 1, images.shape[1]))
        return self._tower("vision", tokens)

    def class_sequences(self, class_tokens) -> Tensor:
        """Token sequences ``(K, ctx_len + 1, input_dim)`` for the text tower."""
        if isinstance(class_tokens, PromptBank):
            return class_tokens.sequences()
        arr = class_tokens.data if isinstance(class_tokens, Tensor) else np.asarray(class_tokens, float)
        if arr.ndim == 3:
            return Tensor(arr)
        if arr.ndim != 2 or arr.shape[1] != self.config.input_dim:
            raise DimensionError(f"class tokens must be (K, {self.config.input_dim}), got {arr.shape}")
        ctx = np.broadcast_to(self.params["text.context"].data,
                              (arr.shape[0],) + self.params["text.context"].shape)
        return Tensor(np.concatenate([ctx, arr[:, None, :]], axis=1))

    def encode_classes(self, class_tokens=None) -> Tensor:
        source = self.prompts if class_tokens is None else class_tokens
        if source is None:
            raise ContractError("no class tokens given and the model has no prompt bank")
        seqs = self.class_sequences(source)
        if seqs.shape[0] < 2:
            raise ConfigurationError(f"need at least 2 classes, got {seqs.shape[0]}")
        return self._tower("text", seqs)


class LinearHead:
    """Precomputed-embedding model: a square projector on image embeddings
    (identity at start) against fixed class embeddings."""

    def __init__(self, class_emb: np.ndarray, strategy: str, tau: float = 0.01):
        if strategy not in ("lvp", "frozen"):
            raise ConfigurationError(
                f"precomputed embeddings support strategies lvp/frozen, not {strategy!r}")
        d = class_emb.shape[1]
        self.strategy = strategy
        self.tau = float(tau)
        self.class_emb = np.asarray(class_emb, dtype=np.float64)
        self.params = {"vision.proj": Tensor(np.eye(d), requires_grad=strategy == "lvp",
                                             name="vision.proj")}
        self.adapters: dict[str, LoraAdapter] = {}
        self.prompts = None
        self.training = False

    def train(self, rng: Rng | None = None) -> "LinearHead":
        self.training = True
        return self

    def eval(self) -> "LinearHead":
        self.training = False
        return self

    def named_tensors(self) -> dict[str, Tensor]:
        return dict(self.params)

    @property
    def trainable_mask(self) -> dict[str, bool]:
        return {k: t.requires_grad for k, t in self.params.items()}

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(k, t) for k, t in self.params.items() if t.requires_grad]

    def zero_grad(self) -> None:
        for _, t in self.trainable():
            t.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def encode_images(self, embeddings) -> Tensor:
        emb = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings)
        return ad.l2_normalize_rows(ad.matmul(emb, ad.transpose(self.params["vision.proj"])))

    def encode_classes(self, class_tokens=None) -> Tensor:
        if self.class_emb.shape[0] < 2:
            raise ConfigurationError("need at least 2 classes")
        return ad.l2_normalize_rows(Tensor(self.class_emb))


def _semi_orthogonal(rng: Rng, shape: tuple[int, int]) -> np.ndarray:
    # isometric where possible so the shared maps do not distort cosines
    m, n = shape
    q, r = np.linalg.qr(rng.normal((max(m, n), min(m, n))))
    q = q * np.sign(np.diag(r))
    return q if m >= n else q.T


def _init_backbone(model: TwoTowerModel) -> None:
    cfg = model.config
    rng = Rng(cfg.seed).fork("backbone")
    h, s = cfg.hidden_dim, cfg.block_scale
    # shared "pre-trained" alignment between the towers
    embed = _semi_orthogonal(rng, (h, cfg.input_dim))
    proj = _semi_orthogonal(rng, (cfg.embed_dim, h))
    for tower in TOWERS:
        trng = rng.fork(tower)
        p = model.params
        p[f"{tower}.embed"] = Tensor(embed.copy(), name=f"{tower}.embed")
        p[f"{tower}.lead"] = Tensor(trng.normal((1, h), 0.1 / np.sqrt(h)), name=f"{tower}.lead")
        for b in range(cfg.num_blocks):
            pre = f"{tower}.block{b}"
            p[f"{pre}.q"] = Tensor(trng.normal((h, h), 1.0 / np.sqrt(h)), name=f"{pre}.q")
            p[f"{pre}.k"] = Tensor(trng.normal((h, h), 1.0 / np.sqrt(h)), name=f"{pre}.k")
            p[f"{pre}.v"] = Tensor(trng.normal((h, h), 1.0 / np.sqrt(h)), name=f"{pre}.v")
            p[f"{pre}.out"] = Tensor(trng.normal((h, h), s / np.sqrt(h)), name=f"{pre}.out")
            p[f"{pre}.ff1"] = Tensor(trng.normal((2 * h, h), 1.0 / np.sqrt(h)), name=f"{pre}.ff1")
            p[f"{pre}.ff2"] = Tensor(trng.normal((h, 2 * h), s / np.sqrt(2 * h)), name=f"{pre}.ff2")
        p[f"{tower}.proj"] = Tensor(proj.copy(), name=f"{tower}.proj")
    model.params["text.context"] = Tensor(
        rng.fork("context").normal((cfg.ctx_len, cfg.input_dim), 0.3 / np.sqrt(cfg.input_dim)),
        name="text.context")


def build_model(cfg: TowerConfig, strategy: str = "lora", *, rank: int = 2,
                gamma: float | None = None, dropout: float = 0.25, tau: float = 0.01,
                class_tokens=None, freeze_text: bool = False,
                rng: Rng | None = None) -> TwoTowerModel:
    """Build the backbone from ``cfg.seed`` and attach the strategy's trainables.

    ``rng`` drives adapter initialisation only, so models built from the same
    config share their backbone bit-for-bit whatever the strategy.
    ``freeze_text`` keeps the text tower free of adapters (vision-only LoRA).
    """
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if tau <= 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    model = TwoTowerModel(cfg, strategy, tau)
    _init_backbone(model)
    rng = rng if rng is not None else Rng(cfg.seed).fork("adapters")

    if strategy == "lora":
        towers = ("vision",) if freeze_text else TOWERS
        for tower in towers:
            for b in range(cfg.num_blocks):
                for tgt in LORA_TARGETS:
                    name = f"{tower}.block{b}.{tgt}"
                    model.adapters[name] = LoraAdapter.create(
                        name, model.params[name], rank, rng.fork(name), gamma, dropout)
    elif strategy == "lvp":
        model.params["vision.proj"].requires_grad = True
        model.params["vision.proj"].zero_grad()
    elif strategy == "prompt":
        if class_tokens is None:
            raise ConfigurationError("prompt strategy needs the class tokens")
        tokens = np.asarray(class_tokens, dtype=np.float64)
        if tokens.ndim != 2 or tokens.shape[0] < 2:
            raise ConfigurationError(f"class tokens must be (K >= 2, input_dim), got {tokens.shape}")
        ctx = np.broadcast_to(model.params["text.context"].data,
                              (tokens.shape[0],) + model.params["text.context"].shape).copy()
        model.prompts = PromptBank(Tensor(ctx, requires_grad=True, name="text.prompt_context"),
                                   tokens.copy())
    return model


def encode_images(model, images) -> Tensor:
    return model.encode_images(images)


def encode_classes(model, class_tokens=None) -> Tensor:
    return model.encode_classes(class_tokens)


# -- checkpoints ---------------------------------------------------------------------
def save_checkpoint(model: TwoTowerModel, path) -> None:
    """Write every tensor plus adapter/strategy metadata to an ``.npz`` file."""
    meta = {
        "strategy": model.strategy,
        "tau": model.tau,
        "config": asdict(model.config),
        "adapters": [a.metadata() for a in model.adapters.values()],
        "prompt_class_tokens": model.prompts is not None,
        "trainable": [k for k, _ in model.trainable()],
    }
    arrays = {f"t/{k}": t.data for k, t in model.named_tensors().items()}
    if model.prompts is not None:
        arrays["prompt_class_tokens"] = model.prompts.class_tokens
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> TwoTowerModel:
    with np.load(Path(path)) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        arrays = {k[2:]: z[k] for k in z.files if k.startswith("t/")}
        class_tokens = z["prompt_class_tokens"] if meta["prompt_class_tokens"] else None
    cfg = TowerConfig(**meta["config"])
    adapters = meta["adapters"]
    model = build_model(cfg, meta["strategy"], tau=meta["tau"],
                        rank=adapters[0]["rank"] if adapters else 2,
                        gamma=adapters[0]["gamma"] if adapters else None,
                        dropout=adapters[0]["dropout_p"] if adapters else 0.25,
                        class_tokens=class_tokens,
                        freeze_text=bool(adapters) and not any(a["target"].startswith("text") for a in adapters))
    tensors = model.named_tensors()
    if set(tensors) != set(arrays):
        raise ContractError("checkpoint tensor names do not match the model layout")
    for k, t in tensors.items():
        t.data = arrays[k].astype(np.float64)
    return model
