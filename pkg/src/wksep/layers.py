"""Parameter registry and the attention block shared by the two models."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import autodiff as ad


class ParamBag:
    """Ordered name -> GradTensor registry with seeded initialization."""

    def __init__(self, rng, dtype=np.float32):
        self.rng = rng
        self.dtype = dtype
        self.items = OrderedDict()

    def param(self, name, shape, std=None, fill=None):
        if name in self.items:
            raise ValueError(f"duplicate parameter {name}")
        if fill is not None:
            arr = np.full(shape, fill, dtype=self.dtype)
        else:
            if std is None:
                fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
                std = 1.0 / np.sqrt(max(fan_in, 1))
            arr = (self.rng.standard_normal(shape) * std).astype(self.dtype)
        t = ad.param(arr, dtype=self.dtype)
        self.items[name] = t
        return t

    def conv(self, name, cout, cin, k):
        std = np.sqrt(2.0 / (cin * k * k))
        self.param(name + ".w", (cout, cin, k, k), std=std)
        self.param(name + ".b", (cout,), fill=0.0)

    def linear(self, name, din, dout, std=None, bias=True):
        self.param(name + ".w", (din, dout), std=std if std is not None else 1.0 / np.sqrt(din))
        if bias:
            self.param(name + ".b", (dout,), fill=0.0)

    def __getitem__(self, name):
        return self.items[name]

    def __contains__(self, name):
        return name in self.items

    def named(self):
        return list(self.items.items())

    def tensors(self):
        return list(self.items.values())

    def state(self):
        return OrderedDict((k, v.value.copy()) for k, v in self.items.items())

    def load_state(self, state):
        missing = [k for k in self.items if k not in state]
        extra = [k for k in state if k not in self.items]
        if missing or extra:
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, t in self.items.items():
            arr = np.asarray(state[k], dtype=self.dtype)
            if arr.shape != t.value.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {t.value.shape}")
            t.value = arr.copy()

    def freeze(self):
        for t in self.items.values():
            t.requires_grad = False

    def checksum(self):
        import hashlib

        h = hashlib.sha256()
        for k, t in self.items.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(t.value, dtype="<f4").tobytes())
        return h.hexdigest()


def add_attention_block(bag, prefix, d_model, d_kv=None, n_heads=2, mlp_ratio=2):
    """Parameters for one pre-norm attention block (self- or cross-)."""
    d_kv = d_model if d_kv is None else d_kv
    bag.param(prefix + ".ln1.g", (d_model,), fill=1.0)
    bag.param(prefix + ".ln1.b", (d_model,), fill=0.0)
    bag.linear(prefix + ".wq", d_model, d_model)
    bag.linear(prefix + ".wk", d_kv, d_model, bias=False)
    bag.linear(prefix + ".wv", d_kv, d_model, bias=False)
    bag.linear(prefix + ".wo", d_model, d_model)
    bag.param(prefix + ".ln2.g", (d_model,), fill=1.0)
    bag.param(prefix + ".ln2.b", (d_model,), fill=0.0)
    bag.linear(prefix + ".mlp1", d_model, mlp_ratio * d_model)
    bag.linear(prefix + ".mlp2", mlp_ratio * d_model, d_model)


def apply_attention_block(bag, prefix, x, kv=None, n_heads=2, key_mask=None):
    """Residual attention + residual MLP; ``kv=None`` means self-attention.

    ``x`` is [B, T, d_model]; an external ``kv`` (cross-attention) is used
    as-is, so a frozen conditioning sequence stays untouched.
    """
    h = ad.layer_norm(x, bag[prefix + ".ln1.g"], bag[prefix + ".ln1.b"])
    kv_in = h if kv is None else kv
    q = ad.linear(h, bag[prefix + ".wq.w"], bag[prefix + ".wq.b"])
    k = ad.matmul(kv_in, bag[prefix + ".wk.w"])
    v = ad.matmul(kv_in, bag[prefix + ".wv.w"])
    att = ad.scaled_dot_attention(q, k, v, n_heads, key_mask=key_mask)
    x = ad.add(x, ad.linear(att, bag[prefix + ".wo.w"], bag[prefix + ".wo.b"]))
    h2 = ad.layer_norm(x, bag[prefix + ".ln2.g"], bag[prefix + ".ln2.b"])
    h2 = ad.gelu(ad.linear(h2, bag[prefix + ".mlp1.w"], bag[prefix + ".mlp1.b"]))
    return ad.add(x, ad.linear(h2, bag[prefix + ".mlp2.w"], bag[prefix + ".mlp2.b"]))
