"""Recurrent model families: layered RNNs and a single-layer LSTM.

Both families share the same surface so that the trainers, the state
reconstruction and the MPC code never need to know which one they hold:

* ``n_x, n_u, n_y, n_theta_x, n_theta_y, n_theta`` dimensions;
* ``fx(x, u, theta_x)`` / ``fy(x, u, theta_y)`` forward maps, broadcasting
  over leading batch dimensions of ``x``;
* ``fx_jac`` / ``fy_jac`` returning the value together with the analytic
  derivatives with respect to the state, the input and the parameters.

The flat parameter vector is ``theta = [theta_x; theta_y]``. Inside each
network the layers are stored in order, every layer as its weight matrix
(row-major) followed by its bias vector.
"""

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DimensionMismatch, NonFiniteState

MODEL_FILE_VERSION = 1
LAYOUT_VERSION = 1


def _sigmoid(v):
    # tanh form is overflow-free for large |v|
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(v, dtype=float)))


def _sigmoid_d1(v):
    s = _sigmoid(v)
    return s * (1.0 - s)


def _sigmoid_d2(v):
    s = _sigmoid(v)
    return s * (1.0 - s) * (1.0 - 2.0 * s)


def _tanh_d1(v):
    t = np.tanh(v)
    return 1.0 - t * t


def _tanh_d2(v):
    t = np.tanh(v)
    return -2.0 * t * (1.0 - t * t)


@dataclass(frozen=True)
class Activation:
    """Elementwise scalar activation with its first two derivatives."""

    name: str

    _TABLE = {
        "atan": (
            np.arctan,
            lambda v: 1.0 / (1.0 + v * v),
            lambda v: -2.0 * v / (1.0 + v * v) ** 2,
        ),
        "sigmoid": (_sigmoid, _sigmoid_d1, _sigmoid_d2),
        "tanh": (np.tanh, _tanh_d1, _tanh_d2),
        "identity": (
            lambda v: v,
            lambda v: np.ones_like(v, dtype=float),
            lambda v: np.zeros_like(v, dtype=float),
        ),
    }
    _ALIASES = {"linear": "identity", "arctan": "atan", "logistic": "sigmoid"}

    def __post_init__(self):
        name = self._ALIASES.get(self.name, self.name)
        if name not in self._TABLE:
            raise ValueError(
                f"unknown activation {self.name!r}; expected one of {sorted(self._TABLE)}"
            )
        object.__setattr__(self, "name", name)

    def __call__(self, v):
        return self._TABLE[self.name][0](np.asarray(v, dtype=float))

    def d1(self, v):
        return self._TABLE[self.name][1](np.asarray(v, dtype=float))

    def d2(self, v):
        return self._TABLE[self.name][2](np.asarray(v, dtype=float))

    @property
    def is_identity(self):
        return self.name == "identity"


class _Mlp:
    """Feedforward chain ``v_i = W_i a_{i-1} + b_i``, ``a_i = act_i(v_i)``.

    The last layer is followed by ``out_act`` (identity for state networks).
    """

    def __init__(self, n_in, widths, acts, out_act):
        self.n_in = n_in
        self.widths = tuple(widths)
        self.acts = tuple(Activation(a) for a in acts)
        self.out_act = Activation(out_act)
        dims = (n_in,) + self.widths
        self.shapes = [(dims[i + 1], dims[i]) for i in range(len(self.widths))]
        self.n_params = sum(r * (c + 1) for r, c in self.shapes)
        self.n_out = self.widths[-1] if self.widths else 0

    def unpack(self, theta):
        layers = []
        pos = 0
        for r, c in self.shapes:
            W = theta[pos:pos + r * c].reshape(r, c)
            pos += r * c
            b = theta[pos:pos + r]
            pos += r
            layers.append((W, b))
        return layers

    def forward(self, z, theta):
        a = z
        layers = self.unpack(theta)
        last = len(layers) - 1
        for i, (W, b) in enumerate(layers):
            v = a @ W.T + b
            a = self.acts[i](v) if i < last else self.out_act(v)
        return a

    def forward_jac(self, z, theta):
        """Value, d out / d z and d out / d theta at a single point ``z``."""
        layers = self.unpack(theta)
        inputs, pre = [], []
        a = z
        last = len(layers) - 1
        for i, (W, b) in enumerate(layers):
            inputs.append(a)
            v = W @ a + b
            pre.append(v)
            a = self.acts[i](v) if i < last else self.out_act(v)
        out = a

        n_out = self.n_out
        J_theta = np.empty((n_out, self.n_params))
        if self.out_act.is_identity:
            G = np.eye(n_out)
        else:
            G = np.diag(self.out_act.d1(pre[last]))
        # column offsets of each layer inside the network's parameter block
        offsets = np.cumsum([0] + [r * (c + 1) for r, c in self.shapes])
        for i in range(last, -1, -1):
            W, _ = layers[i]
            r, c = self.shapes[i]
            start = offsets[i]
            J_theta[:, start:start + r * c] = (
                G[:, :, None] * inputs[i][None, None, :]
            ).reshape(n_out, r * c)
            J_theta[:, start + r * c:start + r * (c + 1)] = G
            G = G @ W
            if i > 0:
                G = G * self.acts[i - 1].d1(pre[i - 1])[None, :]
        return out, G, J_theta


def _as_tuple(value, n, what):
    if isinstance(value, str):
        return (value,) * n
    value = tuple(value)
    if len(value) != n:
        raise ValueError(f"{what}: expected {n} activations, got {len(value)}")
    return value


class _OutputMixin:
    """Output network shared by the RNN and LSTM families."""

    @cached_property
    def _ynet(self):
        n_in = self.n_x if self.strictly_causal else self.n_x + self.n_u
        widths = tuple(self.hidden_y) + (self.n_y,)
        acts = _as_tuple(self.act_y, len(self.hidden_y), "act_y")
        return _Mlp(n_in, widths, acts, self.out_act)

    @property
    def n_theta_y(self):
        return self._ynet.n_params

    @property
    def n_theta(self):
        return self.n_theta_x + self.n_theta_y

    def split(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_theta,):
            raise DimensionMismatch(
                f"theta has shape {theta.shape}, expected ({self.n_theta},)"
            )
        return theta[:self.n_theta_x], theta[self.n_theta_x:]

    def _yinput(self, x, u):
        if self.strictly_causal:
            return x
        return np.concatenate([x, u], axis=-1)

    def fy(self, x, u, theta_y):
        x, u = self._check(x, u)
        return self._ynet.forward(self._yinput(x, u), theta_y)

    def fy_jac(self, x, u, theta_y):
        """Return ``(y, dy/dx, dy/du, dy/dtheta_y)`` at a single point."""
        x, u = self._check(x, u)
        y, Gz, Jt = self._ynet.forward_jac(self._yinput(x, u), theta_y)
        dx = Gz[:, :self.n_x]
        if self.strictly_causal:
            du = np.zeros((self.n_y, self.n_u))
        else:
            du = Gz[:, self.n_x:]
        return y, dx, du, Jt

    def _check(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.shape[-1:] != (self.n_x,) or u.shape[-1:] != (self.n_u,):
            raise DimensionMismatch(
                f"x has shape {x.shape}, u has shape {u.shape}; "
                f"expected trailing sizes {self.n_x} and {self.n_u}"
            )
        if u.ndim < x.ndim:
            u = np.broadcast_to(u, x.shape[:-1] + (self.n_u,))
        elif x.ndim < u.ndim:
            x = np.broadcast_to(x, u.shape[:-1] + (self.n_x,))
        return x, u

    def _y_layout(self):
        # causal specs: the first output layer only has the n_x state columns
        return _layer_layout("y", self._ynet)


def _layer_layout(net, mlp):
    entries = []
    for i, (r, c) in enumerate(mlp.shapes):
        for row in range(r):
            for col in range(c):
                entries.append((net, i + 1, "W", row, col))
        for row in range(r):
            entries.append((net, i + 1, "b", row, 0))
    return entries


@dataclass(frozen=True)
class RnnSpec(_OutputMixin):
    """Layered RNN ``x+ = fx(x, u)``, ``y = fy(x, u)``.

    Parameters
    ----------
    n_u, n_y, n_x : int
        Input, output and state dimensions.
    hidden_x, hidden_y : tuple of int
        Hidden layer widths of the state-update and output networks
        (``L_x - 1`` and ``L_y - 1`` entries). Empty tuples give affine maps.
    act_x, act_y : str or tuple of str
        Hidden activations, one tag for all layers or one per layer.
    out_act : str
        Output function applied to the last output layer.
    strictly_causal : bool
        Drop the input columns of the first output layer from ``theta``.
    """

    n_u: int
    n_y: int
    n_x: int
    hidden_x: tuple = ()
    hidden_y: tuple = ()
    act_x: object = "atan"
    act_y: object = "atan"
    out_act: str = "identity"
    strictly_causal: bool = False
    kind: str = field(default="rnn", init=False)

    def __post_init__(self):
        if min(self.n_u, self.n_y, self.n_x) < 0 or self.n_y < 1:
            raise ValueError("dimensions must be nonnegative and n_y >= 1")
        object.__setattr__(self, "hidden_x", tuple(int(w) for w in self.hidden_x))
        object.__setattr__(self, "hidden_y", tuple(int(w) for w in self.hidden_y))
        if not isinstance(self.act_x, str):
            object.__setattr__(self, "act_x", tuple(self.act_x))
        if not isinstance(self.act_y, str):
            object.__setattr__(self, "act_y", tuple(self.act_y))
        # validate activations and widths eagerly
        self._xnet
        self._ynet

    @cached_property
    def _xnet(self):
        if self.n_x == 0:
            return _Mlp(self.n_u, (), (), "identity")
        widths = tuple(self.hidden_x) + (self.n_x,)
        acts = _as_tuple(self.act_x, len(self.hidden_x), "act_x")
        return _Mlp(self.n_x + self.n_u, widths, acts, "identity")

    @property
    def n_theta_x(self):
        return self._xnet.n_params

    def fx(self, x, u, theta_x):
        x, u = self._check(x, u)
        if self.n_x == 0:
            return np.zeros(x.shape)
        return self._xnet.forward(np.concatenate([x, u], axis=-1), theta_x)

    def fx_jac(self, x, u, theta_x):
        """Return ``(x+, dx+/dx, dx+/du, dx+/dtheta_x)`` at a single point."""
        x, u = self._check(x, u)
        if self.n_x == 0:
            return np.zeros(0), np.zeros((0, 0)), np.zeros((0, self.n_u)), np.zeros((0, 0))
        xn, Gz, Jt = self._xnet.forward_jac(np.concatenate([x, u]), theta_x)
        return xn, Gz[:, :self.n_x], Gz[:, self.n_x:], Jt

    def layers(self, theta):
        """Unflatten ``theta`` into ``(x_layers, y_layers)`` lists of ``(W, b)``.

        For strictly causal specs the first output weight is returned at full
        width with its input columns set to zero.
        """
        th_x, th_y = self.split(theta)
        ylayers = self._ynet.unpack(th_y)
        if self.strictly_causal and ylayers:
            W, b = ylayers[0]
            ylayers[0] = (np.hstack([W, np.zeros((W.shape[0], self.n_u))]), b)
        return self._xnet.unpack(th_x), ylayers

    def flatten(self, xlayers, ylayers):
        parts = [np.concatenate([np.ravel(W), np.ravel(b)]) for W, b in xlayers]
        for i, (W, b) in enumerate(ylayers):
            W = np.asarray(W, dtype=float)
            if i == 0 and self.strictly_causal:
                W = W[:, :self.n_x]
            parts.append(np.concatenate([np.ravel(W), np.ravel(b)]))
        if not parts:
            return np.zeros(0)
        return np.concatenate(parts).astype(float)

    def layout(self):
        """One ``(net, layer, kind, row, col)`` tuple per flat parameter index."""
        return _layer_layout("x", self._xnet) + self._y_layout()

    def _fan_pairs(self):
        return [(c, r, r * c, r) for r, c in self._xnet.shapes] + [
            (c, r, r * c, r) for r, c in self._ynet.shapes
        ]

    def to_dict(self):
        return {
            "kind": "rnn",
            "n_u": self.n_u,
            "n_y": self.n_y,
            "n_x": self.n_x,
            "hidden_x": list(self.hidden_x),
            "hidden_y": list(self.hidden_y),
            "act_x": self.act_x if isinstance(self.act_x, str) else list(self.act_x),
            "act_y": self.act_y if isinstance(self.act_y, str) else list(self.act_y),
            "out_act": self.out_act,
            "strictly_causal": self.strictly_causal,
        }


@dataclass(frozen=True)
class LstmSpec(_OutputMixin):
    """Single-layer LSTM state update with a layered output network.

    The state is ``x = [h; c]`` so ``n_x = 2 n_h``. Gates are stacked as
    forget, input, candidate, output in one ``4 n_h x (n_h + n_u)`` weight.
    """

    n_u: int
    n_y: int
    n_h: int
    hidden_y: tuple = ()
    act_y: object = "atan"
    out_act: str = "identity"
    strictly_causal: bool = False
    kind: str = field(default="lstm", init=False)

    def __post_init__(self):
        if self.n_h < 1 or self.n_u < 0 or self.n_y < 1:
            raise ValueError("LSTM needs n_h >= 1, n_y >= 1")
        object.__setattr__(self, "hidden_y", tuple(int(w) for w in self.hidden_y))
        if not isinstance(self.act_y, str):
            object.__setattr__(self, "act_y", tuple(self.act_y))
        self._ynet

    @property
    def n_x(self):
        return 2 * self.n_h

    @property
    def n_theta_x(self):
        return 4 * self.n_h * (self.n_h + self.n_u + 1)

    def _gates(self, theta_x):
        nh, nu = self.n_h, self.n_u
        nW = 4 * nh * (nh + nu)
        W = theta_x[:nW].reshape(4 * nh, nh + nu)
        b = theta_x[nW:]
        return W, b

    def fx(self, x, u, theta_x):
        x, u = self._check(x, u)
        nh = self.n_h
        W, b = self._gates(theta_x)
        h, c = x[..., :nh], x[..., nh:]
        a = np.concatenate([h, u], axis=-1) @ W.T + b
        f = _sigmoid(a[..., :nh])
        i = _sigmoid(a[..., nh:2 * nh])
        g = np.tanh(a[..., 2 * nh:3 * nh])
        o = _sigmoid(a[..., 3 * nh:])
        c_new = f * c + i * g
        h_new = o * np.tanh(c_new)
        return np.concatenate([h_new, c_new], axis=-1)

    def fx_jac(self, x, u, theta_x):
        x, u = self._check(x, u)
        nh, nu = self.n_h, self.n_u
        W, b = self._gates(theta_x)
        h, c = x[:nh], x[nh:]
        hu = np.concatenate([h, u])
        a = W @ hu + b
        af, ai, ag, ao = a[:nh], a[nh:2 * nh], a[2 * nh:3 * nh], a[3 * nh:]
        f, i, g, o = _sigmoid(af), _sigmoid(ai), np.tanh(ag), _sigmoid(ao)
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc

        # d[c+]/da and d[h+]/da, a = pre-activations of the four gates
        dc_da = np.zeros((nh, 4 * nh))
        dc_da[:, :nh] = np.diag(c * f * (1 - f))
        dc_da[:, nh:2 * nh] = np.diag(g * i * (1 - i))
        dc_da[:, 2 * nh:3 * nh] = np.diag(i * (1 - g * g))
        dh_dc = o * (1 - tc * tc)
        dh_da = dh_dc[:, None] * dc_da
        dh_da[:, 3 * nh:] = np.diag(tc * o * (1 - o))
        D = np.vstack([dh_da, dc_da])

        dhu = D @ W
        dx = np.zeros((2 * nh, 2 * nh))
        dx[:, :nh] = dhu[:, :nh]
        dx[:nh, nh:] = np.diag(dh_dc * f)
        dx[nh:, nh:] = np.diag(f)
        du = dhu[:, nh:]

        nW = 4 * nh * (nh + nu)
        Jt = np.empty((2 * nh, self.n_theta_x))
        Jt[:, :nW] = (D[:, :, None] * hu[None, None, :]).reshape(2 * nh, nW)
        Jt[:, nW:] = D
        return np.concatenate([h_new, c_new]), dx, du, Jt

    def layout(self):
        nh, nu = self.n_h, self.n_u
        entries = [("x", 1, "W", r, c) for r in range(4 * nh) for c in range(nh + nu)]
        entries += [("x", 1, "b", r, 0) for r in range(4 * nh)]
        return entries + self._y_layout()

    def _fan_pairs(self):
        nh, nu = self.n_h, self.n_u
        return [(nh + nu, 4 * nh, 4 * nh * (nh + nu), 4 * nh)] + [
            (c, r, r * c, r) for r, c in self._ynet.shapes
        ]

    def to_dict(self):
        return {
            "kind": "lstm",
            "n_u": self.n_u,
            "n_y": self.n_y,
            "n_h": self.n_h,
            "hidden_y": list(self.hidden_y),
            "act_y": self.act_y if isinstance(self.act_y, str) else list(self.act_y),
            "out_act": self.out_act,
            "strictly_causal": self.strictly_causal,
        }


def spec_from_dict(d):
    d = dict(d)
    kind = d.pop("kind", "rnn")
    if kind == "rnn":
        return RnnSpec(**d)
    if kind == "lstm":
        return LstmSpec(**d)
    raise ValueError(f"unknown model kind {kind!r}")


def init_params(spec, rng, scale=1.0):
    """Xavier-uniform weights, zero biases, concatenated as ``[theta_x; theta_y]``.

    Each weight of a layer with ``fan_in`` inputs and ``fan_out`` outputs is
    drawn from ``U(-b, b)`` with ``b = scale * sqrt(6 / (fan_in + fan_out))``.
    """
    parts = []
    for fan_in, fan_out, n_w, n_b in spec._fan_pairs():
        bound = scale * np.sqrt(6.0 / (fan_in + fan_out))
        parts.append(rng.uniform(-bound, bound, size=n_w))
        parts.append(np.zeros(n_b))
    theta = np.concatenate(parts) if parts else np.zeros(0)
    assert theta.size == spec.n_theta
    return theta


def state_update(spec, x, u, theta_x):
    return spec.fx(x, u, theta_x)


def output(spec, x, u, theta_y):
    return spec.fy(x, u, theta_y)


def lstm_state_update(spec, x, u, theta_x):
    return spec.fx(x, u, theta_x)


def jacobians(spec, x, u, theta):
    """Return ``(dfx/dx, dfx/dtheta_x, dfy/dx, dfy/dtheta_y)``."""
    th_x, th_y = spec.split(theta)
    _, Ax, _, Ath = spec.fx_jac(x, u, th_x)
    _, Cx, _, Cth = spec.fy_jac(x, u, th_y)
    return Ax, Ath, Cx, Cth


def simulate(spec, theta, x0, U, check_finite=True):
    """Open-loop simulation from ``x0`` driven by ``U`` (``N x n_u``).

    ``x0`` may carry leading batch dimensions; the results then have shape
    ``(N, *batch, n_x)`` and ``(N, *batch, n_y)``. Returns the states
    ``x(0), ..., x(N-1)`` and the predicted outputs.
    """
    th_x, th_y = spec.split(theta)
    U = np.asarray(U, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    N = U.shape[0]
    if N < 1:
        raise ValueError("simulate needs at least one input sample")
    x = np.asarray(x0, dtype=float)
    if x.shape[-1:] != (spec.n_x,):
        raise DimensionMismatch(f"x0 has shape {x.shape}, expected n_x={spec.n_x}")
    X = np.empty((N,) + x.shape)
    Y = np.empty((N,) + x.shape[:-1] + (spec.n_y,))
    for k in range(N):
        X[k] = x
        Y[k] = spec.fy(x, U[k], th_y)
        x = spec.fx(x, U[k], th_x)
        if check_finite and not np.all(np.isfinite(x)):
            raise NonFiniteState(f"state became non-finite at step {k + 1}")
    return X, Y


def save_model(path, spec, theta, scaling=None, meta=None):
    """Write the model as JSON with full double precision."""
    doc = {
        "version": MODEL_FILE_VERSION,
        "layout_version": LAYOUT_VERSION,
        "spec": spec.to_dict(),
        "theta": [float(t) for t in np.asarray(theta, dtype=float)],
    }
    if scaling is not None:
        doc["scaling"] = scaling
    if meta:
        doc["meta"] = meta
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_model(path):
    """Read a model file; returns ``(spec, theta, scaling, meta)``."""
    with open(path) as fh:
        doc = json.load(fh)
    if "version" not in doc:
        raise ValueError(f"{path}: missing mandatory 'version' field")
    if doc["version"] != MODEL_FILE_VERSION:
        raise ValueError(f"{path}: unsupported model file version {doc['version']}")
    if doc.get("layout_version") != LAYOUT_VERSION:
        raise ValueError(f"{path}: unsupported layout version {doc.get('layout_version')}")
    spec = spec_from_dict(doc["spec"])
    theta = np.asarray(doc["theta"], dtype=float)
    if theta.size != spec.n_theta:
        raise DimensionMismatch(f"{path}: theta has {theta.size} entries, spec needs {spec.n_theta}")
    return spec, theta, doc.get("scaling"), doc.get("meta", {})
