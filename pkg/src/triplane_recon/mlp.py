"""Small dense decoder with hand-written reverse mode.

The decoder supports two evaluation modes:

* value mode: ``y = mlp(x)``;
* tangent mode: ``y = mlp(x)`` together with ``dy = J_mlp(x) @ dx`` for a
  batch of input tangents ``dx`` of shape ``(n, 3, C)``.  This is what gives
  spatial gradients of an SDF decoder, and its reverse pass is what lets the
  eikonal term be differentiated with respect to the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("softplus", "relu", "tanh")
OUTPUT_ACTIVATIONS = ("identity", "sigmoid")


class DecoderConfigError(ValueError):
    """Raised when decoder layer shapes or settings are inconsistent."""


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _act(name: str, beta: float, z: np.ndarray):
    """Return activation value, first and second derivative."""
    if name == "softplus":
        bz = beta * z
        # one exp shared by the value and both derivatives
        e = np.exp(-np.abs(bz))
        a = (np.maximum(bz, 0.0) + np.log1p(e)) / beta
        inv = 1.0 / (1.0 + e)
        s = np.where(bz >= 0, inv, e * inv)
        return a, s, beta * s * (1.0 - s)
    if name == "tanh":
        a = np.tanh(z)
        d1 = 1.0 - a * a
        return a, d1, -2.0 * a * d1
    if name == "relu":
        d1 = (z > 0).astype(z.dtype)
        return z * d1, d1, np.zeros_like(z)
    raise DecoderConfigError(f"unknown activation {name!r}")


@dataclass
class MlpParams:
    """Dense layers ``x @ W + b``; hidden layers use ``activation``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "softplus"
    beta: float = 1.0
    output_activation: str = "identity"
    widths: list[int] = field(init=False)

    def __post_init__(self) -> None:
        if len(self.weights) == 0 or len(self.weights) != len(self.biases):
            raise DecoderConfigError("need matching, non-empty weight and bias lists")
        if self.activation not in ACTIVATIONS:
            raise DecoderConfigError(f"unknown activation {self.activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise DecoderConfigError(f"unknown output activation {self.output_activation!r}")
        widths = [self.weights[0].shape[0]]
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DecoderConfigError(f"bad layer shapes {w.shape} / {b.shape}")
            if w.shape[0] != widths[-1]:
                raise DecoderConfigError(
                    f"layer input width {w.shape[0]} does not match previous output {widths[-1]}"
                )
            widths.append(w.shape[1])
        for arr in (*self.weights, *self.biases):
            if not np.all(np.isfinite(arr)):
                raise DecoderConfigError("non-finite decoder parameters")
        self.widths = widths

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    @classmethod
    def init(
        cls,
        in_width: int,
        out_width: int,
        hidden: tuple[int, ...] = (64, 64),
        rng: np.random.Generator | None = None,
        activation: str = "softplus",
        beta: float = 1.0,
        output_activation: str = "identity",
        scale: float = 1.0,
    ) -> "MlpParams":
        """He-style random initialisation."""
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = [in_width, *hidden, out_width]
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            ws.append(rng.normal(0.0, scale * np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
            bs.append(np.zeros(fan_out))
        return cls(ws, bs, activation=activation, beta=beta, output_activation=output_activation)

    def copy(self) -> "MlpParams":
        return MlpParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            activation=self.activation,
            beta=self.beta,
            output_activation=self.output_activation,
        )

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order (w0, b0, w1, b1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def check_input(self, x: np.ndarray) -> None:
        if x.shape[-1] != self.in_width:
            raise DecoderConfigError(
                f"decoder expects {self.in_width} input features, got {x.shape[-1]}"
            )

    # -- evaluation -------------------------------------------------------

    def forward(self, x: np.ndarray, dx: np.ndarray | None = None):
        """Evaluate the decoder.

        Args:
            x: ``(n, C)`` inputs.
            dx: optional ``(n, 3, C)`` input tangents.

        Returns:
            ``(y, dy, cache)`` where ``dy`` is ``None`` without tangents.
        """
        self.check_input(x)
        if dx is not None and self.output_activation != "identity":
            raise DecoderConfigError("tangent mode requires an identity output activation")
        acts = [x]
        tans = [dx]
        zs, d1s, d2s = [], [], []
        a, da = x, dx
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            dz = da @ w if da is not None else None
            if i < last:
                a, d1, d2 = _act(self.activation, self.beta, z)
                da = d1[:, None, :] * dz if dz is not None else None
                zs.append(z)
                d1s.append(d1)
                d2s.append(d2)
                tans.append(dz)
                acts.append(a)
            else:
                a, da = z, dz
        y = a
        if self.output_activation == "sigmoid":
            y = _sigmoid(a)
        cache = {"acts": acts, "pre_tans": tans, "d1": d1s, "d2": d2s, "y": y}
        return y, da, cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: dict, gy: np.ndarray, gdy: np.ndarray | None = None):
        """Reverse pass.

        Args:
            cache: from :meth:`forward`.
            gy: ``(n, out)`` cotangent of the output.
            gdy: optional ``(n, 3, out)`` cotangent of the output tangents.

        Returns:
            ``(grads, gx, gdx)`` with ``grads`` matching :meth:`arrays`.
        """
        acts = cache["acts"]
        pre_tans = cache["pre_tans"]
        d1s, d2s = cache["d1"], cache["d2"]
        if self.output_activation == "sigmoid":
            y = cache["y"]
            gy = gy * y * (1.0 - y)
        # cotangents of the last pre-activation and its tangent
        gz, gdz = gy, gdy
        n_layers = len(self.weights)
        grads: list[np.ndarray] = [None] * (2 * n_layers)  # type: ignore[list-item]
        for i in range(n_layers - 1, -1, -1):
            w = self.weights[i]
            a_in = acts[i]
            gw = a_in.T @ gz
            if gdz is not None:
                da_in = pre_tans[0] if i == 0 else d1s[i - 1][:, None, :] * pre_tans[i]
                gw = gw + np.einsum("ndi,ndo->io", da_in, gdz)
            grads[2 * i] = gw
            grads[2 * i + 1] = gz.sum(axis=0)
            ga = gz @ w.T
            gda = gdz @ w.T if gdz is not None else None
            if i == 0:
                return grads, ga, gda
            d1, d2 = d1s[i - 1], d2s[i - 1]
            # a = act(z), da = act'(z) dz
            gz = ga * d1
            if gda is not None:
                dz = pre_tans[i]
                gz = gz + d2 * np.einsum("ndk,ndk->nk", gda, dz)
                gdz = gda * d1[:, None, :]
            else:
                gdz = None
        raise AssertionError("unreachable")
