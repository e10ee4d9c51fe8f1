"""The four network architectures built on the tensor core.

Two spectral mappers (a wide shallow DNN over delta-augmented spliced rows
and a four-block residual conv net over 11x257 context images) and two
frame classifiers (a six-layer leaky-ReLU DNN and a wide-residual conv
front followed by a two-layer bidirectional LSTM). Every model is a named
bag of parameter tensors plus a pure ``forward``; training state lives
elsewhere.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .dsp import BINS, CONTEXT
from .ops import BatchNormState, ShapeError
from .tensor import Tensor, as_tensor
from .util import rng_stream

SPLICED_WIDTH = BINS * (2 * CONTEXT + 1)          # 2827
DELTA_SPLICED_WIDTH = 3 * SPLICED_WIDTH           # 8481
CONTEXT_ROWS = 2 * CONTEXT + 1                    # 11


def _kaiming(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def _xavier(rng, shape, fan_in, fan_out):
    return rng.standard_normal(shape) * np.sqrt(2.0 / (fan_in + fan_out))


class Model:
    """Named parameters, batch-norm states, and a freeze switch."""

    arch = ""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.bn_states: dict[str, BatchNormState] = {}
        self.frozen = False

    def _param(self, name: str, array: np.ndarray) -> Tensor:
        t = Tensor(array, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _bn(self, name: str, num_features: int) -> BatchNormState:
        st = BatchNormState.create(num_features)
        st.gamma.name = f"{name}/gamma"
        st.beta.name = f"{name}/beta"
        self.params[f"{name}/gamma"] = st.gamma
        self.params[f"{name}/beta"] = st.beta
        self.bn_states[name] = st
        return st

    def set_frozen(self, flag: bool) -> None:
        self.frozen = bool(flag)
        for t in self.params.values():
            t.requires_grad = not self.frozen

    def num_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Everything a checkpoint needs: parameters plus BN running stats."""
        out = {name: t.data for name, t in self.params.items()}
        for name, st in self.bn_states.items():
            out[f"{name}/moving_mean"] = st.moving_mean
            out[f"{name}/moving_var"] = st.moving_var
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.state_arrays()
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        if missing or extra:
            raise ShapeError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, t in self.params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeError(f"{name}: shape {arr.shape} vs expected {t.data.shape}")
            t.data = arr.copy()
        for name, st in self.bn_states.items():
            st.moving_mean = np.asarray(arrays[f"{name}/moving_mean"], dtype=np.float64).copy()
            st.moving_var = np.asarray(arrays[f"{name}/moving_var"], dtype=np.float64).copy()

    def config(self) -> dict:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# spectral mappers


class DnnMapper(Model):
    """Two wide ReLU layers over 8481-wide delta-augmented spliced rows.

    Batch norm runs off the moving statistics in train and eval mode alike;
    training only refreshes those statistics on the side.
    """

    arch = "dnn"
    in_width = DELTA_SPLICED_WIDTH

    def __init__(self, hidden: int = 128, dropout_rate: float = 0.3, seed: int = 0):
        super().__init__()
        self.hidden = hidden
        self.dropout_rate = dropout_rate
        self.seed = seed
        rng = rng_stream(seed, "init", "mapper_dnn")
        widths = [self.in_width, hidden, hidden]
        for i in range(2):
            self._param(f"fc{i + 1}/w", _kaiming(rng, (widths[i], widths[i + 1]), widths[i]))
            self._param(f"fc{i + 1}/b", np.zeros(widths[i + 1]))
            self._bn(f"bn{i + 1}", widths[i + 1])
        self._param("out/w", _xavier(rng, (hidden, BINS), hidden, BINS) * 0.1)
        self._param("out/b", np.zeros(BINS))

    def forward(self, x, mode: str = "train", rng=None,
                update_stats: bool | None = None) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.in_width:
            raise ShapeError(f"dnn mapper expects (B, {self.in_width}) input, got {x.shape}")
        if update_stats is None:
            update_stats = mode == "train" and not self.frozen
        h = x
        for i in range(2):
            h = ops.affine(h, self.params[f"fc{i + 1}/w"], self.params[f"fc{i + 1}/b"])
            h = ops.batch_norm(h, self.bn_states[f"bn{i + 1}"], "moving_stats", update_stats)
            h = ops.relu(h)
            h = ops.dropout(h, self.dropout_rate, mode, rng=rng)
        return ops.affine(h, self.params["out/w"], self.params["out/b"])

    def config(self) -> dict:
        return {"role": "mapper", "arch": "dnn", "hidden": self.hidden,
                "dropout": self.dropout_rate, "seed": self.seed}

    @classmethod
    def from_config(cls, cfg: dict) -> "DnnMapper":
        return cls(hidden=int(cfg["hidden"]), dropout_rate=float(cfg["dropout"]),
                   seed=int(cfg.get("seed", 0)))


def residual_block(x: Tensor, down_k, down_b, res1_k, res1_b, res2_k, res2_b,
                   dropout_rate: float, mode: str, rng) -> Tensor:
    """Strided downsampler plus a two-conv residual branch.

    The downsampler output (after ReLU and channel dropout) feeds both the
    residual branch and the skip path, so zeroing the branch weights makes
    the block an exact identity over the downsampled signal.
    """
    d = ops.conv2d(x, down_k, stride=(2, 2), padding="same", bias=down_b)
    d = ops.dropout(ops.relu(d), dropout_rate, mode, channel_wise=True, rng=rng)
    r = ops.conv2d(d, res1_k, stride=(1, 1), padding="same", bias=res1_b)
    r = ops.dropout(ops.relu(r), dropout_rate, mode, channel_wise=True, rng=rng)
    r = ops.conv2d(r, res2_k, stride=(1, 1), padding="same", bias=res2_b)
    r = ops.dropout(ops.relu(r), dropout_rate, mode, channel_wise=True, rng=rng)
    return ops.add(d, r)


class ResnetMapper(Model):
    """Four strided residual conv blocks over a 1x11x257 context image,
    then two ReLU layers and a linear 257-wide output."""

    arch = "resnet"

    def __init__(self, filters=(16, 16, 32, 32), fc_width: int = 128,
                 dropout_rate: float = 0.1, seed: int = 0):
        super().__init__()
        self.filters = tuple(int(f) for f in filters)
        self.fc_width = fc_width
        self.dropout_rate = dropout_rate
        self.seed = seed
        rng = rng_stream(seed, "init", "mapper_resnet")

        h, w = CONTEXT_ROWS, BINS
        c_prev = 1
        for i, f in enumerate(self.filters, start=1):
            fan_d = c_prev * 9
            self._param(f"block{i}/down/k", _kaiming(rng, (f, c_prev, 3, 3), fan_d))
            self._param(f"block{i}/down/b", np.zeros(f))
            for j in (1, 2):
                self._param(f"block{i}/c{j}/k", _kaiming(rng, (f, f, 3, 3), f * 9))
                self._param(f"block{i}/c{j}/b", np.zeros(f))
            c_prev = f
            h, w = -(-h // 2), -(-w // 2)
        self.flat_width = self.filters[-1] * h * w

        self._param("fc1/w", _kaiming(rng, (self.flat_width, fc_width), self.flat_width))
        self._param("fc1/b", np.zeros(fc_width))
        self._param("fc2/w", _kaiming(rng, (fc_width, fc_width), fc_width))
        self._param("fc2/b", np.zeros(fc_width))
        self._param("out/w", _xavier(rng, (fc_width, BINS), fc_width, BINS) * 0.1)
        self._param("out/b", np.zeros(BINS))

    def forward(self, x, mode: str = "train", rng=None) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != CONTEXT_ROWS or x.shape[3] != BINS:
            raise ShapeError(f"resnet mapper expects (B, 1, {CONTEXT_ROWS}, {BINS}), got {x.shape}")
        p = self.params
        for i in range(1, len(self.filters) + 1):
            x = residual_block(
                x,
                p[f"block{i}/down/k"], p[f"block{i}/down/b"],
                p[f"block{i}/c1/k"], p[f"block{i}/c1/b"],
                p[f"block{i}/c2/k"], p[f"block{i}/c2/b"],
                self.dropout_rate, mode, rng,
            )
        h = ops.reshape(x, (x.shape[0], self.flat_width))
        h = ops.relu(ops.affine(h, p["fc1/w"], p["fc1/b"]))
        h = ops.relu(ops.affine(h, p["fc2/w"], p["fc2/b"]))
        return ops.affine(h, p["out/w"], p["out/b"])

    def config(self) -> dict:
        return {"role": "mapper", "arch": "resnet",
                "filters": ",".join(str(f) for f in self.filters),
                "fc_width": self.fc_width, "dropout": self.dropout_rate, "seed": self.seed}

    @classmethod
    def from_config(cls, cfg: dict) -> "ResnetMapper":
        return cls(filters=tuple(int(v) for v in str(cfg["filters"]).split(",")),
                   fc_width=int(cfg["fc_width"]), dropout_rate=float(cfg["dropout"]),
                   seed=int(cfg.get("seed", 0)))


# ---------------------------------------------------------------------------
# senone-style frame classifiers


class DnnClassifier(Model):
    """Six leaky-ReLU layers with batch norm over 2827-wide spliced rows."""

    arch = "dnn"
    in_width = SPLICED_WIDTH

    def __init__(self, hidden: int = 64, num_classes: int = 40, depth: int = 6, seed: int = 0):
        super().__init__()
        self.hidden = hidden
        self.num_classes = num_classes
        self.depth = depth
        self.seed = seed
        rng = rng_stream(seed, "init", "classifier_dnn")
        prev = self.in_width
        for i in range(1, depth + 1):
            self._param(f"fc{i}/w", _kaiming(rng, (prev, hidden), prev))
            self._param(f"fc{i}/b", np.zeros(hidden))
            self._bn(f"bn{i}", hidden)
            prev = hidden
        self._param("out/w", _xavier(rng, (hidden, num_classes), hidden, num_classes) * 0.1)
        self._param("out/b", np.zeros(num_classes))

    def forward(self, x, mode: str = "train", rng=None, update_stats: bool | None = None) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.in_width:
            raise ShapeError(f"dnn classifier expects (B, {self.in_width}) input, got {x.shape}")
        train = mode == "train" and not self.frozen
        if update_stats is None:
            update_stats = train
        bn_mode = "batch_stats" if mode == "train" else "moving_stats"
        h = x
        for i in range(1, self.depth + 1):
            h = ops.affine(h, self.params[f"fc{i}/w"], self.params[f"fc{i}/b"])
            h = ops.batch_norm(h, self.bn_states[f"bn{i}"], bn_mode, update_stats)
            h = ops.leaky_relu(h, 0.3)
        return ops.affine(h, self.params["out/w"], self.params["out/b"])

    def config(self) -> dict:
        return {"role": "classifier", "arch": "dnn", "hidden": self.hidden,
                "num_classes": self.num_classes, "depth": self.depth, "seed": self.seed}

    @classmethod
    def from_config(cls, cfg: dict) -> "DnnClassifier":
        return cls(hidden=int(cfg["hidden"]), num_classes=int(cfg["num_classes"]),
                   depth=int(cfg.get("depth", 6)), seed=int(cfg.get("seed", 0)))


def _lstm_init(rng, in_width, hidden):
    wx = _xavier(rng, (in_width, 4 * hidden), in_width + hidden, hidden)
    wh = _xavier(rng, (hidden, 4 * hidden), in_width + hidden, hidden)
    b = np.zeros(4 * hidden)
    b[hidden : 2 * hidden] = 1.0  # open the forget gate at the start of training
    return wx, wh, b


def lstm_direction(seq: Tensor, wx: Tensor, wh: Tensor, b: Tensor,
                   reverse: bool = False) -> Tensor:
    """Run one LSTM direction over (T, I) rows; returns (T, H) states."""
    t_len = seq.shape[0]
    hidden = wh.shape[0]
    h = Tensor(np.zeros((1, hidden)))
    c = Tensor(np.zeros((1, hidden)))
    outs: list[Tensor] = []
    steps = range(t_len - 1, -1, -1) if reverse else range(t_len)
    for t in steps:
        xt = ops.slice_rows(seq, t, t + 1)
        gates = ops.add(ops.affine(xt, wx, b), ops.matmul(h, wh))
        i_g = ops.sigmoid(ops.slice_cols(gates, 0, hidden))
        f_g = ops.sigmoid(ops.slice_cols(gates, hidden, 2 * hidden))
        g_g = ops.tanh(ops.slice_cols(gates, 2 * hidden, 3 * hidden))
        o_g = ops.sigmoid(ops.slice_cols(gates, 3 * hidden, 4 * hidden))
        c = ops.add(ops.mul(f_g, c), ops.mul(i_g, g_g))
        h = ops.mul(o_g, ops.tanh(c))
        outs.append(h)
    if reverse:
        outs.reverse()
    return ops.concat_rows(outs)


def bilstm_layer(seq: Tensor, fwd, bwd, combine: str = "sum") -> Tensor:
    """Both directions over a (T, I) sequence, summed or concatenated."""
    f_out = lstm_direction(seq, *fwd, reverse=False)
    b_out = lstm_direction(seq, *bwd, reverse=True)
    if combine == "sum":
        return ops.add(f_out, b_out)
    if combine == "concat":
        return ops.concat_cols([f_out, b_out])
    raise ValueError(f"unknown combine {combine!r}")


class WrbnClassifier(Model):
    """Wide-residual conv front end feeding a two-layer bidirectional LSTM.

    Three residual groups of three pre-activation sub-blocks (two 3x3 convs
    each); groups two and three open with a stride-2 conv and a 1x1 strided
    bypass. After the conv stack each downsampled time step keeps its full
    channels-by-frequency plane as one row; a linear layer maps it to the
    recurrent width and rows are repeated back to the input frame count
    before the recurrence. The final two layers are linear.
    """

    arch = "wrbn"
    time_factor = 4                        # two stride-2 groups
    freq_cols = (BINS + 3) // 4            # frequency width after the stack: 65

    def __init__(self, channels=(8, 16, 32), lstm_hidden: int = 64,
                 linear_width: int = 64, num_classes: int = 40,
                 dropout_rate: float = 0.2, seed: int = 0):
        super().__init__()
        self.channels = tuple(int(c) for c in channels)
        self.lstm_hidden = lstm_hidden
        self.linear_width = linear_width
        self.num_classes = num_classes
        self.dropout_rate = dropout_rate
        self.seed = seed
        rng = rng_stream(seed, "init", "classifier_wrbn")

        c1 = self.channels[0]
        self._param("stem/k", _kaiming(rng, (c1, 1, 3, 3), 9))
        self._param("stem/b", np.zeros(c1))
        prev = c1
        for gi, cout in enumerate(self.channels, start=1):
            for si in (1, 2, 3):
                cin = prev if si == 1 else cout
                base = f"g{gi}/s{si}"
                self._bn(f"{base}/bn1", cin)
                self._param(f"{base}/conv1/k", _kaiming(rng, (cout, cin, 3, 3), cin * 9))
                self._param(f"{base}/conv1/b", np.zeros(cout))
                self._bn(f"{base}/bn2", cout)
                self._param(f"{base}/conv2/k", _kaiming(rng, (cout, cout, 3, 3), cout * 9))
                self._param(f"{base}/conv2/b", np.zeros(cout))
                if si == 1 and gi > 1:
                    self._param(f"{base}/bypass/k", _kaiming(rng, (cout, cin, 1, 1), cin))
                    self._param(f"{base}/bypass/b", np.zeros(cout))
            prev = cout

        c3 = self.channels[-1]
        row_width = c3 * self.freq_cols
        self._param("post/w", _xavier(rng, (row_width, linear_width), row_width, linear_width))
        self._param("post/b", np.zeros(linear_width))
        for layer, in_w in (("lstm1", linear_width), ("lstm2", lstm_hidden)):
            for direction in ("fwd", "bwd"):
                wx, wh, b = _lstm_init(rng, in_w, lstm_hidden)
                self._param(f"{layer}/{direction}/wx", wx)
                self._param(f"{layer}/{direction}/wh", wh)
                self._param(f"{layer}/{direction}/b", b)
        self._param("lin1/w", _xavier(rng, (2 * lstm_hidden, linear_width),
                                      2 * lstm_hidden, linear_width))
        self._param("lin1/b", np.zeros(linear_width))
        self._param("out/w", _xavier(rng, (linear_width, num_classes),
                                     linear_width, num_classes) * 0.1)
        self._param("out/b", np.zeros(num_classes))

    def _lstm_params(self, layer: str, direction: str):
        p = self.params
        return (p[f"{layer}/{direction}/wx"], p[f"{layer}/{direction}/wh"],
                p[f"{layer}/{direction}/b"])

    def forward(self, spect, mode: str = "train", rng=None,
                update_stats: bool | None = None) -> Tensor:
        spect = as_tensor(spect)
        if spect.ndim != 2 or spect.shape[1] != BINS:
            raise ShapeError(f"wrbn classifier expects (T, {BINS}) input, got {spect.shape}")
        t_len = spect.shape[0]
        if t_len == 0:
            raise ShapeError("wrbn classifier needs at least one frame")
        train = mode == "train" and not self.frozen
        if update_stats is None:
            update_stats = train
        bn_mode = "batch_stats" if mode == "train" else "moving_stats"
        p = self.params

        x = ops.reshape(spect, (1, 1, t_len, BINS))
        x = ops.conv2d(x, p["stem/k"], stride=(1, 1), padding="same", bias=p["stem/b"])
        for gi in range(1, len(self.channels) + 1):
            for si in (1, 2, 3):
                base = f"g{gi}/s{si}"
                stride = (2, 2) if (si == 1 and gi > 1) else (1, 1)
                h = ops.batch_norm(x, self.bn_states[f"{base}/bn1"], bn_mode, update_stats)
                h = ops.dropout(ops.elu(h), self.dropout_rate, mode, rng=rng)
                h = ops.conv2d(h, p[f"{base}/conv1/k"], stride=stride, padding="same",
                               bias=p[f"{base}/conv1/b"])
                h = ops.batch_norm(h, self.bn_states[f"{base}/bn2"], bn_mode, update_stats)
                h = ops.dropout(ops.elu(h), self.dropout_rate, mode, rng=rng)
                h = ops.conv2d(h, p[f"{base}/conv2/k"], stride=(1, 1), padding="same",
                               bias=p[f"{base}/conv2/b"])
                if si == 1 and gi > 1:
                    skip = ops.conv2d(x, p[f"{base}/bypass/k"], stride=(2, 2),
                                      padding="same", bias=p[f"{base}/bypass/b"])
                else:
                    skip = x
                x = ops.add(skip, h)

        rows = ops.rows_from_maps(x)                       # (ceil(T/4), C3*65)
        rows = ops.elu(ops.affine(rows, p["post/w"], p["post/b"]))
        rows = ops.repeat_rows(rows, self.time_factor, t_len)
        h1 = bilstm_layer(rows, self._lstm_params("lstm1", "fwd"),
                          self._lstm_params("lstm1", "bwd"), combine="sum")
        h2 = bilstm_layer(h1, self._lstm_params("lstm2", "fwd"),
                          self._lstm_params("lstm2", "bwd"), combine="concat")
        h3 = ops.affine(h2, p["lin1/w"], p["lin1/b"])
        return ops.affine(h3, p["out/w"], p["out/b"])

    def config(self) -> dict:
        return {"role": "classifier", "arch": "wrbn",
                "channels": ",".join(str(c) for c in self.channels),
                "lstm_hidden": self.lstm_hidden, "linear_width": self.linear_width,
                "num_classes": self.num_classes, "dropout": self.dropout_rate,
                "seed": self.seed}

    @classmethod
    def from_config(cls, cfg: dict) -> "WrbnClassifier":
        return cls(channels=tuple(int(v) for v in str(cfg["channels"]).split(",")),
                   lstm_hidden=int(cfg["lstm_hidden"]), linear_width=int(cfg["linear_width"]),
                   num_classes=int(cfg["num_classes"]), dropout_rate=float(cfg["dropout"]),
                   seed=int(cfg.get("seed", 0)))


# ---------------------------------------------------------------------------
# factories


def mapper_from_config(cfg: dict) -> Model:
    arch = cfg.get("arch")
    if arch == "dnn":
        return DnnMapper.from_config(cfg)
    if arch == "resnet":
        return ResnetMapper.from_config(cfg)
    raise ValueError(f"unknown mapper arch {arch!r}")


def classifier_from_config(cfg: dict) -> Model:
    arch = cfg.get("arch")
    if arch == "dnn":
        return DnnClassifier.from_config(cfg)
    if arch == "wrbn":
        return WrbnClassifier.from_config(cfg)
    raise ValueError(f"unknown classifier arch {arch!r}")
