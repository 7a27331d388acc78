"""Model definitions: slice-orientation classifier and full-scale-skip U-Net.

Both models are plain numpy: forward(x, train=True) returns (outputs, tape)
and backward(douts, tape) returns a flat {param_name: grad} dict. Inference
calls (train=False) return outputs only and touch no shared state.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from ..errors import ContractViolation
from .layers import (Conv2d, Dense, GlobalAvgPool, MaxPool2d, ReLU,
                     UpsampleNearest, sigmoid, sigmoid_backward,
                     softmax_channels, softmax_channels_backward)

ARCHITECTURES = ("sax_classifier", "unet3plus")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture hyperparameters; serialized verbatim into weight bundles."""

    architecture: str
    in_channels: int = 1
    out_classes: int = 1
    base_width: int = 16
    depth: int = 5
    input_size: int = 128
    cat_width: int | None = None
    deep_supervision: bool = False

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ContractViolation(f"unknown architecture {self.architecture!r}")
        if min(self.in_channels, self.base_width, self.depth) < 1:
            raise ContractViolation("channel/width/depth fields must be positive")
        down = 2 ** (self.depth - 1) if self.architecture == "unet3plus" else 2 ** self.depth
        if self.input_size < down or self.input_size % down:
            raise ContractViolation(
                f"input_size {self.input_size} not divisible by downsampling {down}")
        if self.architecture == "sax_classifier":
            if self.out_classes != 1:
                raise ContractViolation("classifier emits a single probability")
            if self.deep_supervision:
                raise ContractViolation("deep supervision applies to unet3plus only")
        else:
            if self.depth < 3:
                raise ContractViolation("unet3plus needs depth >= 3")
            if self.out_classes < 2:
                raise ContractViolation("unet3plus is a multi-class segmenter (>= 2 classes)")

    @property
    def cat_channels(self) -> int:
        return self.base_width if self.cat_width is None else self.cat_width

    @property
    def n_outputs(self) -> int:
        if self.architecture == "unet3plus" and self.deep_supervision:
            return self.depth - 1
        return 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise ContractViolation(f"unknown spec fields: {sorted(unknown)}")
        return cls(**d)


def _prefixed(prefix: str, layer_or_dict) -> dict:
    d = layer_or_dict if isinstance(layer_or_dict, dict) else layer_or_dict.params()
    return {f"{prefix}/{k}": v for k, v in d.items()}


class SaxClassifier:
    """Conv blocks (conv3x3 + ReLU + 2x2 maxpool, widths doubling) feeding
    global average pooling and two dense layers to one sigmoid probability."""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        if spec.architecture != "sax_classifier":
            raise ContractViolation("spec is not a sax_classifier spec")
        self.spec = spec
        rng = np.random.default_rng(seed)
        widths = [spec.base_width * 2 ** i for i in range(spec.depth)]
        self.convs = []
        cin = spec.in_channels
        for w in widths:
            self.convs.append(Conv2d(cin, w, 3, rng, dtype))
            cin = w
        self.fc1 = Dense(widths[-1], max(widths[-1] // 2, 1), rng, dtype)
        self.fc2 = Dense(self.fc1.cout, 1, rng, dtype)
        self._relu = ReLU()
        self._pool = MaxPool2d(2)
        self._gap = GlobalAvgPool()

    def params(self) -> dict:
        out = {}
        for i, c in enumerate(self.convs):
            out.update(_prefixed(f"conv{i}", c))
        out.update(_prefixed("fc1", self.fc1))
        out.update(_prefixed("fc2", self.fc2))
        return out

    def _check_input(self, x):
        s = self.spec
        if x.ndim != 4 or x.shape[1] != s.in_channels or x.shape[2] != s.input_size \
                or x.shape[3] != s.input_size:
            raise ContractViolation(
                f"expected (N,{s.in_channels},{s.input_size},{s.input_size}), got {x.shape}")

    def forward(self, x: np.ndarray, train: bool = False):
        self._check_input(x)
        tape = []
        cur = x
        for conv in self.convs:
            z, cc = conv.forward(cur)
            a, rc = self._relu.forward(z)
            cur, pc = self._pool.forward(a)
            tape.append((cc, rc, pc))
        g, gc = self._gap.forward(cur)
        h1, d1c = self.fc1.forward(g)
        a1, r1c = self._relu.forward(h1)
        h2, d2c = self.fc2.forward(a1)
        p = sigmoid(h2)
        probs = p[:, 0]
        if not train:
            return probs
        tape.append((gc, d1c, r1c, d2c, p))
        return probs, tape

    def backward(self, dprobs: np.ndarray, tape) -> dict:
        gc, d1c, r1c, d2c, p = tape[-1]
        grads = {}
        dz2 = sigmoid_backward(dprobs[:, None], p)
        da1, g2 = self.fc2.backward(dz2, d2c)
        grads.update(_prefixed("fc2", g2))
        dh1, _ = self._relu.backward(da1, r1c)
        dg, g1 = self.fc1.backward(dh1, d1c)
        grads.update(_prefixed("fc1", g1))
        dcur, _ = self._gap.backward(dg, gc)
        for i in range(len(self.convs) - 1, -1, -1):
            cc, rc, pc = tape[i]
            da, _ = self._pool.backward(dcur, pc)
            dz, _ = self._relu.backward(da, rc)
            dcur, gconv = self.convs[i].backward(dz, cc)
            grads.update(_prefixed(f"conv{i}", gconv))
        return grads

    def predict(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        outs = [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(outs) if outs else np.zeros(0, dtype=x.dtype)


class UNet3Plus:
    """Encoder/decoder segmenter whose every decoder stage fuses one
    re-scaled source from every encoder scale and every coarser decoder
    stage (full-scale skip connections), each mapped to cat_channels by a
    3x3 conv before concatenation and a 3x3 fusion conv."""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        if spec.architecture != "unet3plus":
            raise ContractViolation("spec is not a unet3plus spec")
        self.spec = spec
        rng = np.random.default_rng(seed)
        D = spec.depth
        cat = spec.cat_channels
        fused = D * cat
        self.enc_ch = [spec.base_width * 2 ** i for i in range(D)]
        self.enc = []
        cin = spec.in_channels
        for ch in self.enc_ch:
            self.enc.append(Conv2d(cin, ch, 3, rng, dtype))
            cin = ch
        self.branch = {}
        self.fuse = {}
        for j in range(D - 2, -1, -1):
            for s in range(D):
                src_ch = self.enc_ch[s] if (s <= j or s == D - 1) else fused
                self.branch[(j, s)] = Conv2d(src_ch, cat, 3, rng, dtype)
            self.fuse[j] = Conv2d(fused, fused, 3, rng, dtype)
        self.head = Conv2d(fused, spec.out_classes, 1, rng, dtype)
        self.ds_heads = {}
        if spec.deep_supervision:
            for j in range(1, D - 1):
                self.ds_heads[j] = Conv2d(fused, spec.out_classes, 1, rng, dtype)
        self._relu = ReLU()

    def connection_plan(self) -> dict:
        """Decoder wiring: stage -> ordered source descriptions."""
        D = self.spec.depth
        plan = {}
        for j in range(D - 2, -1, -1):
            srcs = []
            for s in range(D):
                if s < j:
                    srcs.append(f"enc{s}:pool{2 ** (j - s)}")
                elif s == j:
                    srcs.append(f"enc{s}:same")
                elif s == D - 1:
                    srcs.append(f"enc{s}:up{2 ** (s - j)}")
                else:
                    srcs.append(f"dec{s}:up{2 ** (s - j)}")
            plan[j] = srcs
        return plan

    def params(self) -> dict:
        out = {}
        for i, c in enumerate(self.enc):
            out.update(_prefixed(f"enc{i}", c))
        for j in range(self.spec.depth - 2, -1, -1):
            for s in range(self.spec.depth):
                out.update(_prefixed(f"dec{j}/src{s}", self.branch[(j, s)]))
            out.update(_prefixed(f"dec{j}/fuse", self.fuse[j]))
        out.update(_prefixed("head", self.head))
        for j in sorted(self.ds_heads):
            out.update(_prefixed(f"ds{j}", self.ds_heads[j]))
        return out

    def _check_input(self, x):
        s = self.spec
        if x.ndim != 4 or x.shape[1] != s.in_channels or x.shape[2] != s.input_size \
                or x.shape[3] != s.input_size:
            raise ContractViolation(
                f"expected (N,{s.in_channels},{s.input_size},{s.input_size}), got {x.shape}")

    def forward(self, x: np.ndarray, train: bool = False):
        self._check_input(x)
        D = self.spec.depth
        e = []
        enc_tape = []
        cur = x
        for i, conv in enumerate(self.enc):
            pc = None
            if i > 0:
                cur, pc = MaxPool2d(2).forward(e[i - 1])
            z, cc = conv.forward(cur)
            a, rc = self._relu.forward(z)
            e.append(a)
            enc_tape.append((pc, cc, rc))
        d = {}
        dec_tape = {}
        for j in range(D - 2, -1, -1):
            srcs = []
            src_tape = []
            for s in range(D):
                resc = None
                if s < j:
                    t, resc = MaxPool2d(2 ** (j - s)).forward(e[s])
                elif s == j:
                    t = e[s]
                elif s == D - 1:
                    t, resc = UpsampleNearest(2 ** (s - j)).forward(e[s])
                else:
                    t, resc = UpsampleNearest(2 ** (s - j)).forward(d[s])
                z, cc = self.branch[(j, s)].forward(t)
                a, rc = self._relu.forward(z)
                srcs.append(a)
                src_tape.append((resc, cc, rc))
            cat = np.concatenate(srcs, axis=1)
            z, fc = self.fuse[j].forward(cat)
            d[j], frc = self._relu.forward(z)
            dec_tape[j] = (src_tape, fc, frc)
        hz, hc = self.head.forward(d[0])
        probs = softmax_channels(hz)
        outputs = [probs]
        ds_tape = {}
        for j in sorted(self.ds_heads):
            z, cc = self.ds_heads[j].forward(d[j])
            outputs.append(softmax_channels(z))
            ds_tape[j] = cc
        result = outputs if self.spec.deep_supervision else outputs[0]
        if not train:
            return result
        return result, (enc_tape, dec_tape, hc, ds_tape, outputs)

    def backward(self, douts, tape) -> dict:
        """douts: gradient(s) w.r.t. the probability output(s), matching forward."""
        enc_tape, dec_tape, hc, ds_tape, outputs = tape
        D = self.spec.depth
        if not isinstance(douts, (list, tuple)):
            douts = [douts]
        grads = {}
        d_dec = {j: None for j in range(D - 1)}

        def acc(store, key, val):
            store[key] = val if store[key] is None else store[key] + val

        dz = softmax_channels_backward(douts[0], outputs[0])
        dd0, gh = self.head.backward(dz, hc)
        grads.update(_prefixed("head", gh))
        acc(d_dec, 0, dd0)
        for idx, j in enumerate(sorted(self.ds_heads), start=1):
            dz = softmax_channels_backward(douts[idx], outputs[idx])
            ddj, g = self.ds_heads[j].backward(dz, ds_tape[j])
            grads.update(_prefixed(f"ds{j}", g))
            acc(d_dec, j, ddj)

        enc_store = {i: None for i in range(D)}
        for j in range(D - 1):
            src_tape, fc, frc = dec_tape[j]
            dz, _ = self._relu.backward(d_dec[j], frc)
            dcat, gf = self.fuse[j].backward(dz, fc)
            grads.update(_prefixed(f"dec{j}/fuse", gf))
            cat = self.spec.cat_channels
            for s in range(D):
                da = dcat[:, s * cat:(s + 1) * cat]
                resc, cc, rc = src_tape[s]
                dzb, _ = self._relu.backward(da, rc)
                dt, gb = self.branch[(j, s)].backward(dzb, cc)
                grads.update(_prefixed(f"dec{j}/src{s}", gb))
                if s < j:
                    de, _ = MaxPool2d(2 ** (j - s)).backward(dt, resc)
                    acc(enc_store, s, de)
                elif s == j:
                    acc(enc_store, s, dt)
                elif s == D - 1:
                    de, _ = UpsampleNearest(2 ** (s - j)).backward(dt, resc)
                    acc(enc_store, s, de)
                else:
                    dd, _ = UpsampleNearest(2 ** (s - j)).backward(dt, resc)
                    acc(d_dec, s, dd)

        for i in range(D - 1, -1, -1):
            pc, cc, rc = enc_tape[i]
            dz, _ = self._relu.backward(enc_store[i], rc)
            dcur, g = self.enc[i].backward(dz, cc)
            grads.update(_prefixed(f"enc{i}", g))
            if i > 0:
                dprev, _ = MaxPool2d(2).backward(dcur, pc)
                acc(enc_store, i - 1, dprev)
        return grads

    def predict(self, x: np.ndarray, batch_size: int = 4) -> np.ndarray:
        """Full-resolution class probabilities, (N,K,S,S)."""
        outs = []
        for i in range(0, len(x), batch_size):
            out = self.forward(x[i:i + batch_size])
            outs.append(out[0] if self.spec.deep_supervision else out)
        if not outs:
            k = self.spec.out_classes
            s = self.spec.input_size
            return np.zeros((0, k, s, s), dtype=x.dtype)
        return np.concatenate(outs)


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float32):
    if spec.architecture == "sax_classifier":
        return SaxClassifier(spec, seed, dtype)
    return UNet3Plus(spec, seed, dtype)
