"""TDNN + BiLSTM encoder, statistics pooling and the classifier branches.

Three wirings are supported:

* ``single`` -- one C5 encoder and one 5-way head,
* ``mb`` -- one C5 encoder shared by a 2-way fluent head and a 5-way
  disfluent head,
* ``mc`` -- C5 and C9 encoders whose pooled statistics are concatenated
  (512 values) and fed to both heads.

The single-branch classifier is stored under the ``disfluent`` key so a
pretrained single-branch model transplants directly into a branched one.
"""

import math
from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .exceptions import IncompatibleCheckpointError, InvalidMaskError, TooShortError

VARIANTS = ("single", "mb", "mc")
FREEZABLE = ("encoder", "fluent_branch", "disfluent_branch")


@dataclass(frozen=True)
class TdnnLayerSpec:
    in_dim: int
    out_dim: int
    kernel: int
    dilation: int = 1

    @property
    def tap_offsets(self):
        half = (self.kernel - 1) // 2
        return [self.dilation * k for k in range(-half, half + 1)]

    @property
    def half_width(self):
        return max(abs(o) for o in self.tap_offsets)


@dataclass(frozen=True)
class EncoderConfig:
    context: int = 5
    n_mfcc: int = 20
    dims: tuple = (64, 64, 64, 64, 192)
    bilstm_hidden: int = 64
    bilstm_layers: int = 2

    def __post_init__(self):
        if self.context < 1 or self.context % 2 == 0:
            raise ValueError("context must be a positive odd frame count")
        if len(self.dims) != 5:
            raise ValueError("encoder has exactly five TDNN layers")

    @property
    def layer_specs(self):
        # first layer is a dense window of `context` frames; layers 2-3 use
        # 3 taps dilated by 2 and 3; layers 4-5 see only frame t
        shapes = [(self.context, 1), (3, 2), (3, 3), (1, 1), (1, 1)]
        ins = (self.n_mfcc,) + tuple(self.dims[:-1])
        return [TdnnLayerSpec(i, o, k, d) for i, o, (k, d) in zip(ins, self.dims, shapes)]

    @property
    def half_width(self):
        return sum(spec.half_width for spec in self.layer_specs)

    @property
    def total_context(self):
        return 2 * self.half_width + 1

    @property
    def out_dim(self):
        return 2 * self.bilstm_hidden


@dataclass(frozen=True)
class ModelSpec:
    """Everything needed to rebuild a model from a checkpoint."""

    variant: str = "mc"
    heads: tuple = ()
    n_mfcc: int = 20
    dims: tuple = (64, 64, 64, 64, 192)
    bilstm_hidden: int = 64
    bilstm_layers: int = 2
    fc_hidden: int = 64
    dropout: float = 0.3
    disfluent_classes: int = 5
    contexts: tuple = ()

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.contexts:
            object.__setattr__(self, "contexts", (5, 9) if self.variant == "mc" else (5,))
        if not self.heads:
            heads = ("disfluent",) if self.variant == "single" else ("fluent", "disfluent")
            object.__setattr__(self, "heads", heads)
        if set(self.heads) - {"fluent", "disfluent"} or not self.heads:
            raise ValueError(f"bad head set {self.heads}")
        if self.disfluent_classes not in (4, 5):
            raise ValueError("disfluent_classes must be 4 or 5")
        object.__setattr__(self, "dims", tuple(self.dims))
        object.__setattr__(self, "contexts", tuple(self.contexts))
        object.__setattr__(self, "heads", tuple(self.heads))

    def encoder_configs(self):
        return [
            EncoderConfig(c, self.n_mfcc, self.dims, self.bilstm_hidden, self.bilstm_layers)
            for c in self.contexts
        ]

    @property
    def embedding_dim(self):
        return sum(2 * cfg.out_dim for cfg in self.encoder_configs())

    @property
    def min_frames(self):
        return max(cfg.total_context for cfg in self.encoder_configs())

    def head_classes(self, name):
        return 2 if name == "fluent" else self.disfluent_classes

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("dims", "heads", "contexts"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _init_linear(layer):
    fan_in = layer.weight[0].numel()
    bound = 1.0 / math.sqrt(fan_in)
    nn.init.uniform_(layer.weight, -bound, bound)
    nn.init.zeros_(layer.bias)


class TdnnLayer(nn.Module):
    """Temporal linear map over dilated taps, then ReLU, then batch norm."""

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        self.conv = nn.Conv1d(spec.in_dim, spec.out_dim, spec.kernel, dilation=spec.dilation)
        self.bn = nn.BatchNorm1d(spec.out_dim)
        _init_linear(self.conv)

    def forward(self, x):
        return self.bn(torch.relu(self.conv(x)))


class Encoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.tdnn = nn.Sequential(*[TdnnLayer(spec) for spec in cfg.layer_specs])
        self.lstm = nn.LSTM(
            cfg.dims[-1], cfg.bilstm_hidden, num_layers=cfg.bilstm_layers,
            batch_first=True, bidirectional=True,
        )
        h = cfg.bilstm_hidden
        for name, p in self.lstm.named_parameters():
            if name.startswith("weight_hh"):
                for k in range(4):
                    nn.init.orthogonal_(p.data[k * h:(k + 1) * h])
            elif name.startswith("weight_ih"):
                bound = 1.0 / math.sqrt(p.shape[1])
                nn.init.uniform_(p, -bound, bound)
            else:
                nn.init.zeros_(p)
                if name.startswith("bias_ih"):
                    # gate order is input, forget, cell, output
                    nn.init.ones_(p.data[h:2 * h])

    def check_length(self, n_frames):
        if n_frames < self.cfg.total_context:
            raise TooShortError(
                f"{n_frames} frames is below the encoder's total context "
                f"of {self.cfg.total_context}"
            )

    def frame_features(self, x):
        """TDNN stack only: (N, T, D) -> (N, T - 2*half_width, dims[-1])."""
        self.check_length(x.shape[1])
        return self.tdnn(x.transpose(1, 2)).transpose(1, 2)

    def forward(self, x):
        out, _ = self.lstm(self.frame_features(x))
        return out


def stat_pool(seq):
    """Concatenate the temporal mean and population standard deviation.

    ``seq`` is (N, T, F) or (T, F); the result is (N, 2F) or (2F,).
    """
    squeeze = seq.dim() == 2
    if squeeze:
        seq = seq.unsqueeze(0)
    if seq.shape[1] < 2:
        raise TooShortError("statistics pooling needs at least 2 frames")
    mean = seq.mean(dim=1)
    var = seq.var(dim=1, unbiased=False)
    # keeps d(std)/d(var) finite when a feature is constant over time
    positive = var > 0
    std = torch.where(positive, torch.sqrt(torch.where(positive, var, torch.ones_like(var))),
                      torch.zeros_like(var))
    out = torch.cat([mean, std], dim=1)
    return out.squeeze(0) if squeeze else out


class BranchHead(nn.Module):
    """FC-ReLU-BN-dropout twice, then a linear layer to class scores."""

    def __init__(self, in_dim, n_classes, hidden=64, dropout=0.3):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.bn1 = nn.BatchNorm1d(hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.bn2 = nn.BatchNorm1d(hidden)
        self.fc3 = nn.Linear(hidden, n_classes)
        self.drop = nn.Dropout(dropout)
        for layer in (self.fc1, self.fc2, self.fc3):
            _init_linear(layer)

    def forward(self, x):
        x = self.drop(self.bn1(torch.relu(self.fc1(x))))
        x = self.drop(self.bn2(torch.relu(self.fc2(x))))
        return self.fc3(x)


class StutterModel(nn.Module):
    """Encoder(s), statistics pooling and classifier heads.

    ``forward`` returns a dict of pre-softmax scores keyed by head name.
    """

    def __init__(self, spec=None, **kwargs):
        super().__init__()
        self.spec = spec if spec is not None else ModelSpec(**kwargs)
        self.encoders = nn.ModuleList(Encoder(cfg) for cfg in self.spec.encoder_configs())
        self.heads = nn.ModuleDict({
            name: BranchHead(self.spec.embedding_dim, self.spec.head_classes(name),
                             self.spec.fc_hidden, self.spec.dropout)
            for name in self.spec.heads
        })
        self.frozen = frozenset()

    @property
    def variant(self):
        return self.spec.variant

    def embed(self, x):
        pooled = [stat_pool(enc(x)) for enc in self.encoders]
        return torch.cat(pooled, dim=1)

    def forward(self, x):
        emb = self.embed(x)
        return {name: head(emb) for name, head in self.heads.items()}

    def predict_proba(self, x):
        return {name: torch.softmax(s, dim=1) for name, s in self.forward(x).items()}

    def component(self, name):
        if name == "encoder":
            return self.encoders
        head = name.removesuffix("_branch")
        if head not in self.heads:
            raise InvalidMaskError(f"model has no {name}")
        return self.heads[head]

    def components(self):
        names = ["encoder"] + [f"{h}_branch" for h in self.heads]
        return {name: self.component(name) for name in names}

    def train(self, mode=True):
        super().train(mode)
        # frozen groups keep their batch-norm statistics and skip dropout
        for name in self.frozen:
            self.component(name).eval()
        return self


def apply_freeze(model, mask):
    """Exclude the named parameter groups from optimization.

    ``mask`` is an iterable over ``encoder``, ``fluent_branch`` and
    ``disfluent_branch``. Frozen groups get ``requires_grad=False`` and stay
    in evaluation mode while the rest of the model trains.
    """
    mask = frozenset(mask)
    bad = mask - set(FREEZABLE)
    if bad:
        raise InvalidMaskError(f"unknown parameter groups {sorted(bad)}")
    for name in mask:
        model.component(name)
    for name, module in model.components().items():
        for p in module.parameters():
            p.requires_grad_(name not in mask)
    model.frozen = mask
    model.train(model.training)
    return model


def trainable_parameters(model):
    return [p for p in model.parameters() if p.requires_grad]


def _count(module):
    return sum(p.numel() for p in module.parameters())


def param_count(model_or_spec):
    """Parameter counts per component plus ``total``."""
    model = model_or_spec
    if isinstance(model_or_spec, ModelSpec):
        model = StutterModel(model_or_spec)
    counts = {}
    for ctx, enc in zip(model.spec.contexts, model.encoders):
        counts[f"encoder_c{ctx}"] = _count(enc)
    for name, head in model.heads.items():
        counts[f"{name}_branch"] = _count(head)
    counts["total"] = _count(model)
    return counts


def transplant(src, dst, components):
    """Copy the named components' parameters and buffers from ``src`` into ``dst``."""
    mismatched = []
    for name in components:
        try:
            src_state = src.component(name).state_dict()
            dst_mod = dst.component(name)
        except InvalidMaskError:
            mismatched.append(name)
            continue
        dst_state = dst_mod.state_dict()
        for key, value in dst_state.items():
            if key not in src_state or src_state[key].shape != value.shape:
                mismatched.append(f"{name}.{key}")
        extra = set(src_state) - set(dst_state)
        mismatched.extend(f"{name}.{k}" for k in sorted(extra))
    if mismatched:
        raise IncompatibleCheckpointError("cannot transplant parameters", mismatched)
    for name in components:
        dst.component(name).load_state_dict(src.component(name).state_dict())
    return dst


CHECKPOINT_FORMAT = "stutterdet-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    spec: ModelSpec
    state_dict: dict
    epoch: int = 0
    best_val_loss: float = math.inf
    optimizer_state: dict = None
    config: dict = field(default_factory=dict)
    frozen: tuple = ()

    def build(self):
        model = StutterModel(self.spec)
        model.load_state_dict(self.state_dict)
        if self.frozen:
            apply_freeze(model, self.frozen)
        return model.eval()

    def save(self, path):
        torch.save({
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "spec": self.spec.to_dict(),
            "state_dict": self.state_dict,
            "epoch": self.epoch,
            "best_val_loss": self.best_val_loss,
            "optimizer": self.optimizer_state,
            "config": self.config,
            "frozen": list(self.frozen),
        }, path)

    @classmethod
    def load(cls, path):
        try:
            blob = torch.load(path, map_location="cpu", weights_only=False)
        except Exception as exc:  # torch raises a variety of unpickling errors
            raise IncompatibleCheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
            raise IncompatibleCheckpointError(f"{path} is not a model checkpoint")
        if blob["version"] != CHECKPOINT_VERSION:
            raise IncompatibleCheckpointError(f"unsupported checkpoint version {blob['version']}")
        return cls(
            spec=ModelSpec.from_dict(blob["spec"]), state_dict=blob["state_dict"],
            epoch=blob["epoch"], best_val_loss=blob["best_val_loss"],
            optimizer_state=blob["optimizer"], config=blob["config"],
            frozen=tuple(blob["frozen"]),
        )

    @classmethod
    def from_model(cls, model, **kwargs):
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(spec=model.spec, state_dict=state, frozen=tuple(sorted(model.frozen)), **kwargs)
