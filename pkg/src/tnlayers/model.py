"""The convolutional classifier with interchangeable head layers.

Assembles three conv/pool blocks, two head layers (dense or factorized
contraction graphs), and a linear classifier; provides parameter
accounting, a deterministic training loop with early stopping, and
checkpoint serialization.
"""

from __future__ import annotations

import copy
import json
import struct
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import data as dat
from . import nn
from . import tensor_core as tc
from .graph import ContractionGraph
from .init import Rng, init_gaussian_fanin
from .layers import LayerSpec, build_layer, init_graph

HEADS = ("fc1", "fc2", "mera", "tt")
HEAD_OUT = 64  # every head feeds a 64-wide classifier input
CONV_KERNEL = 3


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to rebuild the network deterministically.

    channels lists the six conv layers; head picks the pair of layers
    between the flatten and the classifier.  fc2_width defaults to 5 for
    10-class runs and 10 otherwise.  dtype is float32 for training and
    float64 for verification paths.
    """

    channels: tuple = (64, 64, 64, 64, 64, 256)
    head: str = "fc1"
    classes: int = 10
    fc2_width: int | None = None
    tt_bond: int = 3
    mera_final_mode: str = "merge"
    lrelu_mid_graph: bool = False
    conv_drop: tuple = (0.2, 0.5)  # penultimate conv, final conv
    head_drop: float = 0.5
    leak: float = 0.2
    batchnorm: bool = True
    image_size: int = 32
    in_channels: int = 3
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "conv_drop", tuple(float(p) for p in self.conv_drop))
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if len(self.channels) != 6 or any(c < 1 for c in self.channels):
            raise ValueError(f"channels must be 6 positive counts, "
                             f"got {self.channels}")
        if self.classes < 2:
            raise ValueError(f"classes must be >= 2, got {self.classes}")
        if self.fc2_width is not None and self.fc2_width < 1:
            raise ValueError(f"fc2_width must be >= 1, got {self.fc2_width}")
        if self.tt_bond < 1:
            raise ValueError(f"tt_bond must be >= 1, got {self.tt_bond}")
        if self.mera_final_mode not in ("merge", "pair"):
            raise ValueError(f"mera_final_mode must be 'merge' or 'pair', "
                             f"got {self.mera_final_mode!r}")
        if len(self.conv_drop) != 2 or not all(0 <= p < 1 for p in self.conv_drop):
            raise ValueError(f"conv_drop must be two rates in [0, 1), "
                             f"got {self.conv_drop}")
        if not 0 <= self.head_drop < 1:
            raise ValueError(f"head_drop must be in [0, 1), got {self.head_drop}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, "
                             f"got {self.dtype!r}")
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")

    @property
    def fc2_n(self) -> int:
        if self.fc2_width is not None:
            return self.fc2_width
        return 5 if self.classes == 10 else 10

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        d["conv_drop"] = tuple(d["conv_drop"])
        return ModelConfig(**d)


def toy_config(head: str, **overrides) -> ModelConfig:
    """A tiny fp64 configuration cheap enough for finite-difference checks."""
    base = dict(channels=(1, 1, 1, 1, 1, 4), head=head, classes=3,
                image_size=25, in_channels=1, dtype="float64")
    base.update(overrides)
    return ModelConfig(**base)


def graph_forward(g: ContractionGraph, node_vars: dict, x: ad.Var,
                  leak: float | None = None) -> ad.Var:
    """Differentiable batch application of a contraction-graph layer.

    Mirrors the plain forward walk: nodes contract into a running state,
    emitted output legs ride along, and a final permutation gathers them.
    With leak set, the running state passes through LReLU after every
    node that emits an output leg (replacing the usual post-layer LReLU);
    already-emitted legs are clipped again at later emissions, which is
    the price of keeping the state a single tensor.
    """
    d, n = g.mode_dim, len(g.input_legs)
    in_bind = {leg: m for m, leg in enumerate(g.input_legs)}
    edge_by_dst = {dst: src for src, dst in g.edges}
    out_set = set(g.output_legs)
    batch = x.shape[0]
    state = ad.reshape(x, (batch,) + (d,) * n)
    keys = [("in", m) for m in range(n)]
    for node in g.nodes:
        srcs = []
        for ax in g.in_axes(node.node_id):
            leg = (node.node_id, ax)
            srcs.append(("in", in_bind[leg]) if leg in in_bind
                        else edge_by_dst[leg])
        axes = [1 + keys.index(k) for k in srcs]
        state = ad.contract(state, axes, node_vars[node.node_id],
                            g.in_axes(node.node_id))
        keys = [k for k in keys if k not in srcs]
        emitted = [(node.node_id, ax) for ax in g.out_axes(node.node_id)]
        keys += emitted
        if leak is not None and any(k in out_set for k in emitted):
            state = ad.lrelu(state, leak)
    order = [0] + [1 + keys.index(leg) for leg in g.output_legs]
    order += [ax for ax in range(1, len(keys) + 1) if ax not in order]
    return ad.reshape(ad.permute(state, order), (batch, g.out_width))


class Model:
    """Built network: parameter shapes, initializer, and forward pass."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.np_dtype = np.dtype(cfg.dtype)
        s = cfg.image_size
        for _ in range(3):
            s = -(-s // 2)
        if s != 4:
            raise ValueError(
                f"the conv/pool stack supports 32x32 inputs (any size from "
                f"25 to 32 pools down to 4x4); got {cfg.image_size}x"
                f"{cfg.image_size}, which pools to {s}x{s}")
        self.flat_width = 4 * 4 * cfg.channels[5]
        self.graphs = None
        if cfg.head in ("mera", "tt"):
            self.graphs = self._build_head_graphs()

        chans = (cfg.in_channels,) + cfg.channels
        shapes: dict[str, tuple] = {}
        for i in range(6):
            shapes[f"conv{i + 1}_w"] = (chans[i + 1], chans[i],
                                        CONV_KERNEL, CONV_KERNEL)
        if cfg.batchnorm:
            for i in range(6):
                shapes[f"bn{i + 1}_gamma"] = (chans[i + 1],)
                shapes[f"bn{i + 1}_beta"] = (chans[i + 1],)
        if self.graphs is None:
            mid = self.flat_width if cfg.head == "fc1" else cfg.fc2_n
            shapes["head1_w"] = (self.flat_width, mid)
            shapes["head2_w"] = (mid, HEAD_OUT)
        else:
            for tag, g in zip(("head1", "head2"), self.graphs):
                for node in g.nodes:
                    shapes[f"{tag}_n{node.node_id}"] = node.tensor.shape
        shapes["cls_w"] = (HEAD_OUT, cfg.classes)
        self.param_shapes = shapes

    def _build_head_graphs(self) -> tuple[ContractionGraph, ContractionGraph]:
        cfg = self.cfg
        w = self.flat_width
        n = w.bit_length() - 1
        if 2 ** n != w or n < 6:
            raise ValueError(
                f"{cfg.head} head needs a power-of-two flatten width of at "
                f"least 64, got {w}; choose a final conv channel count of "
                f"the form 4^k (e.g. 64 or 256)")
        k = n - 6  # output legs to fix so the layer ends 64 wide
        common: dict = {"mode_dim": 2}
        if cfg.head == "mera":
            if n % 2 != 0:
                raise ValueError(
                    f"mera head needs an even mode count; flatten width {w} "
                    f"gives {n} modes (use a power-of-4 width such as 1024 "
                    f"or 4096)")
            if k > n // 2:
                raise ValueError(f"cannot fix {k} outputs on the first "
                                 f"column of {n // 2} elements")
            common["final_mode"] = cfg.mera_final_mode
            fixed = tuple(range(k))
        else:
            common["bond_dim"] = cfg.tt_bond
            if n > 13:
                raise ValueError(f"tt head fixing pattern supports at most "
                                 f"13 modes, got {n}")
            fixed = tuple(n - 1 - 2 * i for i in range(k))
        g1 = build_layer(LayerSpec(cfg.head, n, **common), dtype=self.np_dtype)
        g2 = build_layer(LayerSpec(cfg.head, n, fixed_outputs=fixed, **common),
                         dtype=self.np_dtype)
        return g1, g2

    # -- parameters -------------------------------------------------------------

    def init_params(self, rng: Rng) -> dict[str, np.ndarray]:
        cfg, dt = self.cfg, self.np_dtype
        params: dict[str, np.ndarray] = {}
        for name, shape in self.param_shapes.items():
            if name.startswith("conv"):
                fanin = shape[1] * shape[2] * shape[3]
                params[name] = init_gaussian_fanin(shape, fanin,
                                                   rng.split(name), dtype=dt)
            elif name.endswith("_gamma"):
                params[name] = np.ones(shape, dtype=dt)
            elif name.endswith("_beta"):
                params[name] = np.zeros(shape, dtype=dt)
            elif name in ("head1_w", "head2_w", "cls_w"):
                params[name] = init_gaussian_fanin(shape, shape[0],
                                                   rng.split(name), dtype=dt)
        if self.graphs is not None:
            for tag, g in zip(("head1", "head2"), self.graphs):
                gi = init_graph(g, rng.split(tag), scheme="orthogonal")
                for node in gi.nodes:
                    params[f"{tag}_n{node.node_id}"] = np.asarray(node.tensor)
        return {name: params[name] for name in self.param_shapes}

    def fresh_running(self) -> dict:
        if not self.cfg.batchnorm:
            return {}
        chans = self.cfg.channels
        return {f"bn{i + 1}": {"mean": np.zeros(chans[i], dtype=np.float64),
                               "var": np.ones(chans[i], dtype=np.float64)}
                for i in range(6)}

    def head_graph_with(self, params: dict, layer: int) -> ContractionGraph:
        """The head graph carrying the given parameter tensors."""
        if self.graphs is None:
            raise ValueError(f"{self.cfg.head} head has no contraction graph")
        g = self.graphs[layer - 1]
        return g.with_tensors({node.node_id: params[f"head{layer}_n{node.node_id}"]
                               for node in g.nodes})

    def param_report(self) -> dict:
        """Stored-weight counts by part; batch-norm scale/shift tensors are
        trainable but excluded, the accounting covers kernels and weight
        matrices only."""
        sizes = {name: int(np.prod(shape))
                 for name, shape in self.param_shapes.items()}
        conv = sum(v for k, v in sizes.items() if k.startswith("conv"))
        h1 = sum(v for k, v in sizes.items() if k.startswith("head1"))
        h2 = sum(v for k, v in sizes.items() if k.startswith("head2"))
        cls = sizes["cls_w"]
        return {"head": self.cfg.head, "conv_stack": conv,
                "head_layer_1": h1, "head_layer_2": h2, "classifier": cls,
                "fc_layer": h1 + h2 + cls,
                "total": conv + h1 + h2 + cls}

    # -- forward ----------------------------------------------------------------

    def forward(self, v: dict[str, ad.Var], x: ad.Var, *, training: bool,
                rng: Rng | None = None, running: dict | None = None) -> ad.Var:
        """Logits for a batch; v maps every parameter name to a leaf Var."""
        cfg = self.cfg
        if training and rng is None:
            raise ValueError("training-mode forward needs an rng for dropout")
        if cfg.batchnorm and running is None:
            raise ValueError("batchnorm layers need running statistics")
        drop_at = {4: cfg.conv_drop[0], 5: cfg.conv_drop[1]}
        h = x
        for i in range(6):
            h = nn.conv2d(h, v[f"conv{i + 1}_w"])
            p = drop_at.get(i, 0.0)
            if training and p > 0:
                h = nn.dropout(h, p, rng, True)
            if i % 2 == 1:
                h = nn.maxpool(h)
            if cfg.batchnorm:
                h = nn.batchnorm(h, v[f"bn{i + 1}_gamma"], v[f"bn{i + 1}_beta"],
                                 running[f"bn{i + 1}"], training)
            h = ad.lrelu(h, cfg.leak)
        h = ad.reshape(h, (h.shape[0], self.flat_width))
        for layer in (1, 2):
            if training and cfg.head_drop > 0:
                h = nn.dropout(h, cfg.head_drop, rng, True)
            if self.graphs is None:
                h = ad.lrelu(ad.matmul(h, v[f"head{layer}_w"]), cfg.leak)
            else:
                g = self.graphs[layer - 1]
                nv = {node.node_id: v[f"head{layer}_n{node.node_id}"]
                      for node in g.nodes}
                if cfg.lrelu_mid_graph:
                    h = graph_forward(g, nv, h, leak=cfg.leak)
                else:
                    h = ad.lrelu(graph_forward(g, nv, h), cfg.leak)
        return ad.matmul(h, v["cls_w"])

    def predict(self, params: dict, running: dict, images: np.ndarray,
                chunk: int = 100) -> np.ndarray:
        """Eval-mode logits computed in chunks."""
        outs = []
        for i in range(0, images.shape[0], chunk):
            tape = ad.Tape()
            v = {k: tape.leaf(p, name=k) for k, p in params.items()}
            xb = tape.leaf(images[i:i + chunk], name="x")
            outs.append(self.forward(v, xb, training=False,
                                     running=running).value.copy())
            tape.release()
        return np.concatenate(outs, axis=0)


def build_model(cfg: ModelConfig) -> Model:
    return Model(cfg)


# -- training ----------------------------------------------------------------------


@dataclass
class TrainState:
    """Resumable snapshot: parameters, optimizer, stats, and rng cursors."""

    params: dict
    opt_state: dict
    running: dict
    rng_states: dict
    iteration: int
    best_val: float
    best_test: float
    stale_checks: int
    metrics_rows: int


@dataclass
class TrainResult:
    metrics: list          # rows (iteration, train_loss, val_acc, test_acc, wall_ms)
    best_val: float
    best_test: float
    iterations: int
    stop_reason: str       # "patience" or "max_iter"
    state: TrainState      # snapshot taken at the best validation check


def _accuracy_of(model: Model, params: dict, running: dict, x: np.ndarray,
                 y: np.ndarray) -> float:
    logits = model.predict(params, running, x)
    return float((logits.argmax(axis=1) == y).mean())


def train(model: Model, splits: dat.Splits, *, seed: int, max_iter: int,
          check_interval: int = 500, patience: int = 10, batch_size: int = 50,
          lr: float = 1e-3, augment_train: bool = True,
          per_channel_mean: bool = False, resume: TrainState | None = None,
          log=None) -> TrainResult:
    """Run the training loop with validation checks and early stopping.

    Accuracy is measured every check_interval iterations; training stops
    after `patience` successive checks without a new best validation
    accuracy, or at max_iter.  The returned state snapshots the best
    check, and resuming from a snapshot replays the exact run.
    """
    cfg = model.cfg
    mean = dat.train_mean(splits.train.images, per_channel_mean)
    xtr = dat.normalize(splits.train.images, mean, model.np_dtype)
    ytr = splits.train.labels
    xva = dat.normalize(splits.val.images, mean, model.np_dtype)
    xte = dat.normalize(splits.test.images, mean, model.np_dtype)

    root = Rng(seed)
    cursor = dat.BatchCursor(len(ytr), batch_size, root.split("batches"))
    aug_rng = root.split("augment")
    drop_rng = root.split("dropout")
    opt = nn.Adam(lr=lr)
    if resume is None:
        params = model.init_params(root.split("init"))
        running = model.fresh_running()
        start, best_val, best_test, stale, prior_rows = 0, -1.0, -1.0, 0, 0
    else:
        params = {k: p.copy() for k, p in resume.params.items()}
        opt.load_state_dict(resume.opt_state)
        running = copy.deepcopy(resume.running)
        cursor.restore(resume.rng_states["cursor"])
        aug_rng.set_state(resume.rng_states["augment"])
        drop_rng.set_state(resume.rng_states["dropout"])
        start = resume.iteration
        best_val, best_test = resume.best_val, resume.best_test
        stale, prior_rows = resume.stale_checks, resume.metrics_rows

    def snapshot(it: int, rows: int) -> TrainState:
        return TrainState(
            params={k: p.copy() for k, p in params.items()},
            opt_state=opt.state_dict(),
            running=copy.deepcopy(running),
            rng_states={"cursor": cursor.state(), "augment": aug_rng.state(),
                        "dropout": drop_rng.state()},
            iteration=it, best_val=best_val, best_test=best_test,
            stale_checks=stale, metrics_rows=rows)

    metrics: list[tuple] = []
    best_state = None
    loss_sum, loss_n = 0.0, 0
    t0 = time.perf_counter()
    stop_reason = "max_iter"
    for it in range(start + 1, max_iter + 1):
        idx = cursor.next()
        xb = xtr[idx]
        if augment_train:
            xb = dat.augment(xb, aug_rng)
        tape = ad.Tape()
        v = {k: tape.leaf(p, name=k) for k, p in params.items()}
        logits = model.forward(v, tape.leaf(xb, name="x"), training=True,
                               rng=drop_rng, running=running)
        loss = nn.softmax_xent(logits, ytr[idx])
        lv = float(loss.value)
        if not np.isfinite(lv):
            raise RuntimeError(f"training diverged: loss {lv} at "
                               f"iteration {it}")
        grads = tape.gradients(loss, v)
        tape.release()
        params = opt.step(params, grads)
        loss_sum += lv
        loss_n += 1
        if it % check_interval == 0 or it == max_iter:
            val_acc = _accuracy_of(model, params, running, xva,
                                   splits.val.labels)
            test_acc = _accuracy_of(model, params, running, xte,
                                    splits.test.labels)
            wall = int((time.perf_counter() - t0) * 1000)
            row = (it, loss_sum / max(loss_n, 1), val_acc, test_acc, wall)
            metrics.append(row)
            loss_sum, loss_n = 0.0, 0
            if val_acc > best_val:
                best_val, best_test, stale = val_acc, test_acc, 0
                best_state = snapshot(it, prior_rows + len(metrics))
            else:
                stale += 1
            if log is not None:
                log(row)
            if stale >= patience:
                stop_reason = "patience"
                break
    final_it = metrics[-1][0] if metrics else start
    if best_state is None:  # no check improved on the resume point
        best_state = snapshot(final_it, prior_rows + len(metrics))
    return TrainResult(metrics=metrics, best_val=best_val, best_test=best_test,
                       iterations=final_it, stop_reason=stop_reason,
                       state=best_state)


# -- checkpoints -------------------------------------------------------------------

CKPT_MAGIC = b"TNCK"


def save_checkpoint(path, cfg: ModelConfig, state: TrainState) -> None:
    """Single-file checkpoint: JSON manifest plus a tensor stream."""
    tensors: list[tuple[str, np.ndarray]] = []
    for k, p in state.params.items():
        tensors.append((f"p/{k}", p))
    for k, m in state.opt_state["m"].items():
        tensors.append((f"m/{k}", m))
    for k, v in state.opt_state["v"].items():
        tensors.append((f"v/{k}", v))
    for k, d in state.running.items():
        tensors.append((f"r/{k}/mean", d["mean"]))
        tensors.append((f"r/{k}/var", d["var"]))
    manifest = {"format": "TNCK1", "config": cfg.to_dict(),
                "iteration": state.iteration, "best_val": state.best_val,
                "best_test": state.best_test,
                "stale_checks": state.stale_checks,
                "metrics_rows": state.metrics_rows,
                "adam_t": state.opt_state["t"],
                "rng_states": state.rng_states,
                "tensors": [name for name, _ in tensors]}
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in tensors:
            tc.write_tensor(fh, arr)


def load_checkpoint(path) -> tuple[ModelConfig, TrainState]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (length,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(length).decode("utf-8"))
        groups: dict[str, dict] = {"p": {}, "m": {}, "v": {}, "r": {}}
        for name in manifest["tensors"]:
            kind, rest = name.split("/", 1)
            groups[kind][rest] = tc.read_tensor(fh)
        trailing = fh.read(1)
    if trailing:
        raise ValueError("checkpoint has trailing bytes after tensor stream")
    running: dict[str, dict] = {}
    for key, arr in groups["r"].items():
        tag, stat = key.rsplit("/", 1)
        running.setdefault(tag, {})[stat] = arr
    state = TrainState(
        params=groups["p"],
        opt_state={"t": manifest["adam_t"], "m": groups["m"], "v": groups["v"]},
        running=running,
        rng_states=manifest["rng_states"],
        iteration=manifest["iteration"], best_val=manifest["best_val"],
        best_test=manifest["best_test"],
        stale_checks=manifest["stale_checks"],
        metrics_rows=manifest["metrics_rows"])
    return ModelConfig.from_dict(manifest["config"]), state
