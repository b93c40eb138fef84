"""Declarative description of a whitening layer and its text form.

Examples of the text form::

    BN  BN->W  BN->W->G  ZCA(1e-05,1e+12)  ZCAM(1e-05,1e+12,0.01)
    ZCAE(0,inf)  ZCAcorr(0,inf)->W->G  LDL(1e-05)  LDLcorr(1e-05)  PLDLP(1e-05)

A ``->W`` suffix appends a learnable rotation and makes the preceding
whitening stage parameterless; ``->W->G`` additionally rescales.
"""
import math
import re
from dataclasses import dataclass, field, replace

from .errors import SpecError

WHITENERS = ("BN", "ZCA", "LDL", "PLDLP")
CONDITIONING = ("plain", "max", "entropy")

DEFAULT_EPS = 1e-5
DEFAULT_K = 1e12
DEFAULT_C = 0.01

_BASES = {
    # text prefix -> (whitener, conditioning)
    "BN": ("BN", "plain"),
    "ZCA": ("ZCA", "plain"),
    "ZCAM": ("ZCA", "max"),
    "ZCAE": ("ZCA", "entropy"),
    "LDL": ("LDL", "plain"),
    "PLDLP": ("PLDLP", "plain"),
}

_PATTERN = re.compile(
    r"^(?P<base>ZCAM|ZCAE|ZCA|PLDLP|LDL|BN)(?P<corr>corr)?"
    r"(?:\((?P<args>[^()]*)\))?"
    r"(?P<suffix>(?:->[A-Za-z]+)*)$"
)


@dataclass(frozen=True)
class WhiteningSpec:
    whitener: str
    standardize_first: bool = False
    conditioning: str = "plain"
    eps: float = DEFAULT_EPS
    K: float = DEFAULT_K
    c: float = DEFAULT_C
    rotate: bool = False
    scale: bool = True
    # moving-average factor; runtime configuration, not part of the name
    alpha: float = field(default=0.9, compare=False)

    def __post_init__(self):
        if self.whitener not in WHITENERS:
            raise SpecError(f"unknown whitener {self.whitener!r}")
        if self.conditioning not in CONDITIONING:
            raise SpecError(f"unknown conditioning {self.conditioning!r}")
        if self.conditioning != "plain" and self.whitener != "ZCA":
            raise SpecError("max/entropy conditioning only applies to ZCA")
        if self.standardize_first:
            if self.whitener not in ("ZCA", "LDL"):
                raise SpecError("corr composition requires a ZCA or LDL whitener")
            if self.conditioning == "entropy":
                raise SpecError("corr composition supports plain and max ZCA only")
        if not self.scale and not self.rotate:
            raise SpecError("a layer without rotation always carries a scale")
        if not self.eps >= 0:
            raise SpecError(f"eps must be >= 0, got {self.eps}")
        if not self.K > 0:
            raise SpecError(f"K must be > 0, got {self.K}")
        if not 0 < self.c < 1:
            raise SpecError(f"c must lie in (0, 1), got {self.c}")
        if not 0 <= self.alpha <= 1:
            raise SpecError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def stage_parameterless(self):
        """Whitening stage runs with unit scale and zero bias."""
        return self.rotate

    @property
    def base_name(self):
        if self.whitener == "ZCA":
            return {"plain": "ZCA", "max": "ZCAM", "entropy": "ZCAE"}[self.conditioning]
        return self.whitener

    @property
    def name(self):
        return format_spec(self)

    def __str__(self):
        return self.name

    @classmethod
    def parse(cls, text, **overrides):
        return parse_spec(text, **overrides)

    def with_constants(self, eps=None, K=None, c=None):
        kw = {}
        if eps is not None:
            kw["eps"] = eps
        if K is not None:
            kw["K"] = K
        if c is not None:
            kw["c"] = c
        return replace(self, **kw)


def _fmt(x):
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    s = f"{x:.12g}"
    if float(s) != x:
        s = repr(x)
    return s


def _args_for(spec):
    if spec.whitener == "ZCA":
        args = [spec.eps, spec.K]
        if spec.conditioning == "max":
            args.append(spec.c)
        return args
    if spec.whitener == "BN":
        return [] if spec.eps == DEFAULT_EPS else [spec.eps]
    return [spec.eps]


def format_spec(spec):
    out = spec.base_name + ("corr" if spec.standardize_first else "")
    args = _args_for(spec)
    if args:
        out += "(" + ",".join(_fmt(a) for a in args) + ")"
    if spec.rotate:
        out += "->W"
        if spec.scale:
            out += "->G"
    return out


def _parse_number(tok, text):
    tok = tok.strip()
    try:
        return float(tok)
    except ValueError:
        raise SpecError(f"bad numeric argument {tok!r} in {text!r}") from None


def parse_spec(text, **overrides):
    """Parse a layer name such as ``ZCAM(1e-5,1e12,0.01)->W->G``.

    Keyword ``overrides`` (eps, K, c, alpha) replace the parsed values.
    """
    raw = text
    text = "".join(str(text).split()).replace("→", "->").replace("Γ", "G")
    m = _PATTERN.match(text)
    if m is None:
        raise SpecError(f"cannot parse layer spec {raw!r}")
    whitener, cond = _BASES[m["base"]]
    kw = {"whitener": whitener, "conditioning": cond,
          "standardize_first": m["corr"] is not None}
    args = []
    if m["args"] is not None and m["args"] != "":
        args = [_parse_number(t, raw) for t in m["args"].split(",")]
    if whitener == "ZCA":
        names = ["eps", "K", "c"] if cond == "max" else ["eps", "K"]
    else:
        names = ["eps"]
    if len(args) > len(names):
        raise SpecError(f"{m['base']} takes at most {len(names)} arguments: {raw!r}")
    kw.update(zip(names, args))
    suffix = [s for s in m["suffix"].split("->") if s]
    if suffix == []:
        kw.update(rotate=False, scale=True)
    elif suffix == ["W"]:
        kw.update(rotate=True, scale=False)
    elif suffix == ["W", "G"]:
        kw.update(rotate=True, scale=True)
    else:
        raise SpecError(f"unsupported composition suffix in {raw!r}")
    for key, value in overrides.items():
        if value is not None:
            kw[key] = value
    return WhiteningSpec(**kw)
