"""
Positional-encoded MLP radiance field with hand-written reverse mode.

Positions are mapped to [-1, 1]^3 by the scene bounds, encoded and passed
through a ReLU (or softplus) trunk with one skip connection. Density is read
off the trunk through a softplus head; color comes from a small branch that
also sees the encoded view direction, so density never depends on direction.
All weights live in one flat float vector; named blocks are views into it.
"""

import struct
import logging
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .utils import InputError, NumericError, check_unit_vectors, chunk_slices, ordered_map, seeded_rng

mod_logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PFNERF01"
_HEADER = struct.Struct("<8s6i6dQ")
_ACTIVATIONS = ("relu", "softplus")
_DENSITY_CHUNK = 32768


@dataclass
class FieldConfig:
    L_pos: int = 10
    L_dir: int = 4
    hidden_width: int = 128
    hidden_layers: int = 4
    skip_layer: int = 2
    hidden_activation: str = "relu"

    def validate(self):
        if self.L_pos < 1:
            raise InputError("L_pos must be >= 1, got {}".format(self.L_pos))
        if self.L_dir < 0:
            raise InputError("L_dir must be >= 0, got {}".format(self.L_dir))
        if self.hidden_width < 8:
            raise InputError("hidden_width must be >= 8, got {}".format(self.hidden_width))
        if self.hidden_layers < 1:
            raise InputError("hidden_layers must be >= 1, got {}".format(self.hidden_layers))
        if self.hidden_activation not in _ACTIVATIONS:
            raise InputError(
                "hidden_activation must be one of {}, got {!r}".format(_ACTIVATIONS, self.hidden_activation)
            )
        return self

    @property
    def pos_dim(self):
        return 3 + 6 * self.L_pos

    @property
    def dir_dim(self):
        return 3 + 6 * self.L_dir

    @property
    def color_width(self):
        return max(self.hidden_width // 2, 1)

    def layout(self):
        """Ordered (name, shape) of every parameter block."""
        w = self.hidden_width
        blocks = []
        for i in range(self.hidden_layers):
            fan_in = self.pos_dim if i == 0 else w
            if i == self.skip_layer and i > 0:
                fan_in += self.pos_dim
            blocks.append(("trunk{}.weight".format(i), (fan_in, w)))
            blocks.append(("trunk{}.bias".format(i), (w,)))
        blocks += [
            ("sigma.weight", (w, 1)),
            ("sigma.bias", (1,)),
            ("feature.weight", (w, w)),
            ("feature.bias", (w,)),
            ("color0.weight", (w + self.dir_dim, self.color_width)),
            ("color0.bias", (self.color_width,)),
            ("color1.weight", (self.color_width, 3)),
            ("color1.bias", (3,)),
        ]
        return blocks

    @property
    def parameter_count(self):
        return int(sum(np.prod(shape) for _, shape in self.layout()))


def encode(p, L):
    """``[p, sin(2^k pi p), cos(2^k pi p) for k < L]`` along the last axis."""
    if L < 0:
        raise InputError("Encoding frequency count must be >= 0, got {}".format(L))
    p = np.asarray(p)
    parts = [p]
    for k in range(L):
        scaled = (2.0 ** k) * np.pi * p
        parts.append(np.sin(scaled))
        parts.append(np.cos(scaled))
    return np.concatenate(parts, axis=-1)


class ReLU(object):
    def forward(self, z):
        return np.maximum(z, 0)

    def backward(self, z, dout):
        return dout * (z > 0)


class Softplus(object):
    def forward(self, z):
        return np.logaddexp(0, z).astype(z.dtype, copy=False)

    def backward(self, z, dout):
        return dout * expit(z)


class FieldOutput(object):
    """Densities ``sigma`` (n,) and colors ``color`` (n, 3)."""

    def __init__(self, sigma, color):
        self.sigma = sigma
        self.color = color

    def __len__(self):
        return self.sigma.shape[0]


class RadianceField(object):
    """MLP field over the box ``bounds``.

    Parameters
    ----------
    config : FieldConfig
    bounds : array_like
        ``(2, 3)`` box used to normalize positions.
    params : numpy.ndarray, optional
        Flat parameter vector; drawn uniformly in +-1/sqrt(fan_in) from
        ``seed`` when omitted.
    """

    def __init__(self, config, bounds, params=None, seed=0, dtype=np.float32):
        self.config = config.validate()
        bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
        if np.any(bounds[1] <= bounds[0]):
            raise InputError("Degenerate field bounds {}".format(bounds.tolist()))
        self.bounds = bounds
        layout = config.layout()
        if params is None:
            rng = seeded_rng(seed, 3)
            chunks = []
            for name, shape in layout:
                fan_in = shape[0] if name.endswith("weight") else self._fan_in(layout, name)
                limit = 1.0 / np.sqrt(fan_in)
                chunks.append(rng.uniform(-limit, limit, int(np.prod(shape))))
            params = np.concatenate(chunks)
        params = np.array(params, dtype=dtype).reshape(-1)
        if params.shape[0] != config.parameter_count:
            raise InputError(
                "Expected {} parameters, got {}".format(config.parameter_count, params.shape[0])
            )
        if not np.all(np.isfinite(params)):
            raise NumericError("Field parameters must be finite")
        self.params = params
        self.blocks = self._views(params)
        self.activation = ReLU() if config.hidden_activation == "relu" else Softplus()

    @staticmethod
    def _fan_in(layout, bias_name):
        weights = dict(layout)
        return weights[bias_name.replace("bias", "weight")][0]

    def _views(self, vector):
        views = OrderedDict()
        offset = 0
        for name, shape in self.config.layout():
            size = int(np.prod(shape))
            views[name] = vector[offset:offset + size].reshape(shape)
            offset += size
        return views

    @property
    def dtype(self):
        return self.params.dtype

    @property
    def parameter_count(self):
        return self.params.shape[0]

    def with_dtype(self, dtype):
        return RadianceField(self.config, self.bounds, self.params.astype(dtype), dtype=dtype)

    def copy(self):
        return RadianceField(self.config, self.bounds, self.params.copy(), dtype=self.dtype)

    def normalize(self, positions):
        lower, upper = self.bounds
        return 2.0 * (positions - lower) / (upper - lower) - 1.0

    def _trunk(self, enc):
        cfg, b = self.config, self.blocks
        inputs, pre = [], []
        h = enc
        for i in range(cfg.hidden_layers):
            if i == cfg.skip_layer and i > 0:
                h = np.concatenate([h, enc], axis=-1)
            inputs.append(h)
            z = h.dot(b["trunk{}.weight".format(i)]) + b["trunk{}.bias".format(i)]
            pre.append(z)
            h = self.activation.forward(z)
        return h, inputs, pre

    def _prepare(self, positions, directions=None):
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(positions)):
            raise NumericError("Non-finite field input position")
        enc = encode(self.normalize(positions), self.config.L_pos).astype(self.dtype)
        if directions is None:
            return enc, None
        directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
        if directions.shape[0] != positions.shape[0]:
            raise InputError("Positions and directions must have the same length")
        if not np.all(np.isfinite(directions)):
            raise NumericError("Non-finite field input direction")
        check_unit_vectors(directions, atol=1e-5)
        return enc, encode(directions, self.config.L_dir).astype(self.dtype)

    def density(self, positions):
        """Density only (trunk plus density head)."""
        enc, _ = self._prepare(positions)
        h, _, _ = self._trunk(enc)
        raw = h.dot(self.blocks["sigma.weight"])[:, 0] + self.blocks["sigma.bias"][0]
        return np.logaddexp(0, raw)

    def forward(self, positions, directions):
        """Forward pass; returns the outputs and the cache ``backward`` needs."""
        b = self.blocks
        enc, enc_dir = self._prepare(positions, directions)
        h, inputs, pre = self._trunk(enc)
        sigma_raw = h.dot(b["sigma.weight"])[:, 0] + b["sigma.bias"][0]
        feature = h.dot(b["feature.weight"]) + b["feature.bias"]
        color_in = np.concatenate([feature, enc_dir], axis=-1)
        color_pre = color_in.dot(b["color0.weight"]) + b["color0.bias"]
        color_hidden = self.activation.forward(color_pre)
        logits = color_hidden.dot(b["color1.weight"]) + b["color1.bias"]
        out = FieldOutput(np.logaddexp(0, sigma_raw), expit(logits))
        cache = {
            "inputs": inputs,
            "pre": pre,
            "trunk_out": h,
            "sigma_raw": sigma_raw,
            "color_in": color_in,
            "color_pre": color_pre,
            "color_hidden": color_hidden,
            "color": out.color,
        }
        return out, cache

    def backward(self, cache, grad_sigma, grad_color):
        """Parameter gradient for upstream gradients on sigma (n,) and color (n, 3)."""
        cfg, b = self.config, self.blocks
        grad = np.zeros_like(self.params)
        g = self._views(grad)
        grad_sigma = np.asarray(grad_sigma, dtype=self.dtype).reshape(-1)
        grad_color = np.asarray(grad_color, dtype=self.dtype).reshape(-1, 3)
        w = cfg.hidden_width

        color = cache["color"]
        d_logits = grad_color * color * (1.0 - color)
        g["color1.weight"][...] = cache["color_hidden"].T.dot(d_logits)
        g["color1.bias"][...] = d_logits.sum(axis=0)
        d_hidden = d_logits.dot(b["color1.weight"].T)
        d_color_pre = self.activation.backward(cache["color_pre"], d_hidden)
        g["color0.weight"][...] = cache["color_in"].T.dot(d_color_pre)
        g["color0.bias"][...] = d_color_pre.sum(axis=0)
        d_feature = d_color_pre.dot(b["color0.weight"].T)[:, :w]

        h = cache["trunk_out"]
        g["feature.weight"][...] = h.T.dot(d_feature)
        g["feature.bias"][...] = d_feature.sum(axis=0)
        d_h = d_feature.dot(b["feature.weight"].T)

        d_sigma_raw = (grad_sigma * expit(cache["sigma_raw"]))[:, np.newaxis]
        g["sigma.weight"][...] = h.T.dot(d_sigma_raw)
        g["sigma.bias"][...] = d_sigma_raw.sum(axis=0)
        d_h = d_h + d_sigma_raw.dot(b["sigma.weight"].T)

        for i in reversed(range(cfg.hidden_layers)):
            d_z = self.activation.backward(cache["pre"][i], d_h)
            g["trunk{}.weight".format(i)][...] = cache["inputs"][i].T.dot(d_z)
            g["trunk{}.bias".format(i)][...] = d_z.sum(axis=0)
            if i == 0:
                break
            d_in = d_z.dot(b["trunk{}.weight".format(i)].T)
            d_h = d_in[:, :w]

        for name, view in g.items():
            if not np.all(np.isfinite(view)):
                raise NumericError("Non-finite gradient", "parameter block {}".format(name))
        return grad

    def save(self, path):
        """Checkpoint: fixed header then little-endian float32 parameters."""
        cfg = self.config
        header = _HEADER.pack(
            CHECKPOINT_MAGIC,
            cfg.L_pos, cfg.L_dir, cfg.hidden_width, cfg.hidden_layers, cfg.skip_layer,
            _ACTIVATIONS.index(cfg.hidden_activation),
            *(list(self.bounds.reshape(-1)) + [self.parameter_count])
        )
        with open(path, "wb") as fid:
            fid.write(header)
            fid.write(self.params.astype("<f4").tobytes())
        return path

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fid:
            raw = fid.read()
        if len(raw) < _HEADER.size or raw[:8] != CHECKPOINT_MAGIC:
            raise InputError("{} is not a field checkpoint".format(path))
        fields = _HEADER.unpack(raw[: _HEADER.size])
        config = FieldConfig(
            L_pos=fields[1], L_dir=fields[2], hidden_width=fields[3], hidden_layers=fields[4],
            skip_layer=fields[5], hidden_activation=_ACTIVATIONS[fields[6]],
        )
        bounds = np.array(fields[7:13]).reshape(2, 3)
        params = np.frombuffer(raw[_HEADER.size:], dtype="<f4")
        if params.shape[0] != fields[13]:
            raise InputError("Truncated field checkpoint {}".format(path))
        return cls(config, bounds, params.astype(np.float32))


def _check_outputs(out):
    if not (np.all(np.isfinite(out.sigma)) and np.all(np.isfinite(out.color))):
        raise NumericError("Non-finite field output")
    return out


def evaluate(field, positions, directions):
    """Densities and colors for a batch of samples."""
    out, _ = field.forward(positions, directions)
    return _check_outputs(out)


def evaluate_with_gradients(field, positions, directions, grad_sigma, grad_color):
    """Outputs plus the parameter gradient of the upstream loss."""
    out, cache = field.forward(positions, directions)
    _check_outputs(out)
    return out, field.backward(cache, grad_sigma, grad_color)


def density_batched(field, positions, threads=None):
    """``field.density`` over fixed chunks, concatenated in order."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    chunks = chunk_slices(positions.shape[0], _DENSITY_CHUNK)
    parts = ordered_map(lambda s: field.density(positions[s]), chunks, threads)
    return np.concatenate([np.zeros(0)] + parts)
