"""Checkpoint container: a zip of raw little-endian float64 tensors plus a text manifest.

Manifest lines::

    batchortho-checkpoint <version>
    meta <key> <value>
    tensor <name> <dim0>x<dim1>...

Entries carry a fixed timestamp so identical tensors give identical bytes.
"""
import zipfile

import numpy as np

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _info(name):
    zi = zipfile.ZipInfo(name, date_time=_EPOCH)
    zi.compress_type = zipfile.ZIP_DEFLATED
    zi.external_attr = 0o644 << 16
    return zi


def _shape_str(shape):
    return "x".join(str(d) for d in shape) if shape else "scalar"


def save_tensors(path, tensors, meta=None):
    """Write ``{name: array}`` (and string ``meta``) to ``path``."""
    lines = [f"batchortho-checkpoint {FORMAT_VERSION}"]
    for k, v in (meta or {}).items():
        if any(c.isspace() for c in k):
            raise ValueError(f"meta key {k!r} contains whitespace")
        lines.append(f"meta {k} {v}")
    with zipfile.ZipFile(path, "w") as zf:
        for name, arr in tensors.items():
            if any(c.isspace() for c in name):
                raise ValueError(f"tensor name {name!r} contains whitespace")
            a = np.asarray(arr, dtype="<f8")
            lines.append(f"tensor {name} {_shape_str(a.shape)}")
            zf.writestr(_info(f"tensors/{name}"), a.tobytes())
        zf.writestr(_info("MANIFEST"), "\n".join(lines) + "\n")


def load_tensors(path):
    """Returns ``(tensors, meta)``."""
    tensors, meta = {}, {}
    with zipfile.ZipFile(path) as zf:
        manifest = zf.read("MANIFEST").decode("utf-8").splitlines()
        head = manifest[0].split()
        if head[:1] != ["batchortho-checkpoint"] or int(head[1]) != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint header {manifest[0]!r}")
        for line in manifest[1:]:
            kind, name, rest = line.split(" ", 2)
            if kind == "meta":
                meta[name] = rest
            elif kind == "tensor":
                shape = () if rest == "scalar" else tuple(int(d) for d in rest.split("x"))
                raw = zf.read(f"tensors/{name}")
                tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            else:
                raise ValueError(f"{path}: unknown manifest entry {line!r}")
    return tensors, meta


def net_tensors(net):
    """Parameters and running covariances of every module, keyed by dotted name."""
    out = {name: p for name, _, _, p in net.named_params()}
    for m in net.norm_layers():
        st = m.layer.state
        if st.running.sigma_hat is not None:
            out[f"{m.name}.sigma_hat"] = st.running.sigma_hat
        if st.standardize.sigma_hat is not None:
            out[f"{m.name}.std_sigma_hat"] = st.standardize.sigma_hat
    return out


def save_net(path, net, spec, extra_meta=None):
    meta = {"db": net.db, "spec": str(spec)}
    meta.update(extra_meta or {})
    save_tensors(path, net_tensors(net), meta)
