"""Synthetic attribute-annotated face corpus: generator, captions, clients, manifest.

Faces are rasterised at pixel centres from closed-form shape predicates, so the
19-class segmentation is exact and every attribute parameter is known. The
caption grammar is original to this package; it has a direct and an indirect
phrasing for every attribute value.
"""
from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import threading
import urllib.request
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np
from PIL import Image

from . import masks as mt
from .errors import ClientError, LoadError, ParameterError

log = logging.getLogger(__name__)

ATTRIBUTES = ("eyebrows", "eyes", "mouth", "glasses", "beard")
ATTR_ID = {name: i for i, name in enumerate(ATTRIBUTES)}
HEAD_WORD = {"eyebrows": "brow", "eyes": "eyes", "mouth": "mouth", "glasses": "glasses", "beard": "beard"}
ATTR_CLASSES = {"eyebrows": (2, 3), "eyes": (4, 5), "mouth": (11, 12, 13), "glasses": (6,)}
ATTR_WEIGHTS = {"eyebrows": 0.4, "eyes": 0.15, "mouth": 0.15, "glasses": 0.15, "beard": 0.15}

BROW_BUCKETS = ("thin", "medium", "thick")
BROW_HALF_THICKNESS = (0.55, 1.05, 1.6)     # pixels at 32x32
EYE_SHAPES = ("round", "almond", "narrow")
MOUTH_SHAPES = ("smiling", "neutral", "frowning")
GLASSES_SHAPES = ("round", "square")
BEARD_LEVELS = ("none", "stubble", "full")

# (direct, indirect) phrasings keyed by attribute value
GRAMMAR = {
    "eyebrows": {
        "thin": ("thin {tone} eyebrows", "delicate sparse brows"),
        "medium": ("medium {tone} eyebrows", "natural balanced brows"),
        "thick": ("thick {tone} eyebrows", "a bold expressive brow"),
    },
    "eyes": {
        "round": ("large round eyes", "wide curious eyes"),
        "almond": ("almond shaped eyes", "graceful elegant eyes"),
        "narrow": ("narrow squinting eyes", "sleepy hooded eyes"),
    },
    "mouth": {
        "smiling": ("a smiling mouth", "a cheerful upturned mouth"),
        "neutral": ("a neutral closed mouth", "a calm relaxed mouth"),
        "frowning": ("a frowning mouth", "a gloomy downturned mouth"),
    },
    "glasses": {
        "round": ("round dark glasses", "round scholarly glasses"),
        "square": ("square dark glasses", "sharp rectangular glasses"),
    },
    "beard": {
        "none": ("a clean shaven beard area", "smooth skin with no beard"),
        "stubble": ("light stubble beard", "a rugged shadow of beard"),
        "full": ("a full thick beard", "a dense rugged beard"),
    },
}
TONE_WORDS = ("light", "dark")


def vocabulary_words() -> list[str]:
    from .conditioning import tokenize
    words = set(TONE_WORDS)
    for forms in GRAMMAR.values():
        for direct, indirect in forms.values():
            words.update(tokenize(direct.replace("{tone}", "")))
            words.update(tokenize(indirect))
    return sorted(words)


def caption_for(attribute: str, value: str, indirect: bool = False, tone: str = "dark") -> str:
    if attribute not in GRAMMAR or value not in GRAMMAR[attribute]:
        raise ParameterError(f"no caption for {attribute}={value}")
    text = GRAMMAR[attribute][value][int(indirect)]
    return text.replace("{tone}", tone)


@dataclass
class SyntheticFaceSpec:
    seed: int
    size: int = 32
    background: tuple = (0.3, 0.4, 0.5)
    skin_base: tuple = (0.8, 0.62, 0.5)
    skin_gradient: tuple = (0.05, 0.0)       # amplitude along x, y in [-0.1, 0.1]
    skin_texture: float = 0.02               # noise amplitude in [0, 0.04]
    hair_color: tuple = (0.2, 0.12, 0.08)
    center: tuple = (0.5, 0.52)
    radii: tuple = (0.34, 0.42)
    brow_bucket: int = 1                     # index into BROW_BUCKETS
    brow_darkness: float = 0.8               # in [0.55, 0.95]
    brow_arch: float = 0.02
    eye_shape: int = 0
    mouth_shape: int = 1
    glasses: bool = False
    glasses_shape: int = 0
    beard: int = 0
    indirect: dict = field(default_factory=dict)   # attribute -> use indirect phrasing

    @classmethod
    def sample(cls, seed: int, size: int = 32) -> "SyntheticFaceSpec":
        rng = np.random.default_rng(seed)
        tone = rng.uniform(0.35, 0.9)
        skin = (tone, tone * rng.uniform(0.7, 0.82), tone * rng.uniform(0.55, 0.7))
        return cls(
            seed=seed, size=size,
            background=tuple(rng.uniform(0.15, 0.75, 3)),
            skin_base=tuple(float(c) for c in skin),
            skin_gradient=tuple(rng.uniform(-0.1, 0.1, 2)),
            skin_texture=float(rng.uniform(0.0, 0.04)),
            hair_color=tuple(rng.uniform(0.02, 0.45) * np.array([1.0, 0.8, 0.6])),
            center=(0.5 + rng.uniform(-0.03, 0.03), 0.52 + rng.uniform(-0.03, 0.03)),
            radii=(rng.uniform(0.31, 0.36), rng.uniform(0.39, 0.44)),
            brow_bucket=int(rng.integers(3)),
            brow_darkness=float(rng.uniform(0.55, 0.95)),
            brow_arch=float(rng.uniform(0.0, 0.03)),
            eye_shape=int(rng.integers(3)),
            mouth_shape=int(rng.integers(3)),
            glasses=bool(rng.random() < 0.35),
            glasses_shape=int(rng.integers(2)),
            beard=int(rng.choice(3, p=[0.5, 0.25, 0.25])),
            indirect={a: bool(rng.random() < 0.3) for a in ATTRIBUTES},
        )

    def validate(self) -> None:
        if self.size < 16 or self.size & (self.size - 1):
            raise ParameterError(f"size must be a power of two >= 16, got {self.size}")
        if not 0 <= self.brow_bucket < 3 or not 0 <= self.eye_shape < 3 or not 0 <= self.mouth_shape < 3:
            raise ParameterError("attribute bucket out of range")
        if not 0 <= self.beard < 3 or not 0 <= self.glasses_shape < 2:
            raise ParameterError("attribute bucket out of range")
        if not 0.0 <= self.brow_darkness <= 1.0 or not 0.0 <= self.skin_texture <= 0.1:
            raise ParameterError("appearance parameter out of range")


@dataclass
class Face:
    image: np.ndarray            # (3, H, W) float32 in [-1, 1], quantised to 8 bits
    seg: np.ndarray              # (H, W) uint8 class ids
    captions: list               # [(attribute_id, caption)]
    attr_masks: dict             # attribute_id -> precise (H, W) uint8 mask
    spec: SyntheticFaceSpec


class FaceGeometry:
    """Shape predicates of one face evaluated at pixel centres.

    Each predicate returns a boolean (H, W) grid; rasterisation and the
    consistency oracle in the tests both go through these.
    """

    def __init__(self, spec: SyntheticFaceSpec):
        self.spec = spec
        S = spec.size
        self.S = S
        jj, ii = np.meshgrid(np.arange(S), np.arange(S))
        self.u = (jj + 0.5) / S
        self.v = (ii + 0.5) / S
        self.cx, self.cy = spec.center
        self.rx, self.ry = spec.radii

    def face(self):
        return ((self.u - self.cx) / self.rx) ** 2 + ((self.v - self.cy) / self.ry) ** 2 <= 1.0

    def neck(self):
        return (np.abs(self.u - self.cx) <= 0.13) & (self.v >= self.cy + 0.25)

    def hair(self):
        big = ((self.u - self.cx) / (self.rx * 1.12)) ** 2 + ((self.v - self.cy) / (self.ry * 1.08)) ** 2 <= 1.0
        return big & (self.v < self.cy - self.ry * 0.74)

    def brow(self, side: int):
        s = self.spec
        bx, by = self.cx + side * 0.17, self.cy - 0.215
        half_len = 0.1
        x = (self.u - bx) / half_len
        centre = by - s.brow_arch * (1.0 - x ** 2)
        half = BROW_HALF_THICKNESS[s.brow_bucket] / 32.0
        return (np.abs(x) <= 1.0) & (np.abs(self.v - centre) <= half)

    def eye(self, side: int):
        half_h = (0.055, 0.04, 0.026)[self.spec.eye_shape]
        ex, ey = self.cx + side * 0.17, self.cy - 0.05
        return ((self.u - ex) / 0.08) ** 2 + ((self.v - ey) / half_h) ** 2 <= 1.0

    def iris(self, side: int):
        ex, ey = self.cx + side * 0.17, self.cy - 0.05
        return self.eye(side) & (np.hypot(self.u - ex, self.v - ey) <= 0.035)

    def nose(self):
        nx, ny = self.cx, self.cy + 0.07
        return ((self.u - nx) / 0.045) ** 2 + ((self.v - ny) / 0.06) ** 2 <= 1.0

    def _mouth_curve(self):
        curv = (0.045, 0.0, -0.045)[self.spec.mouth_shape]
        x = (self.u - self.cx) / 0.13
        return self.cy + 0.22 + curv * (1.0 - x ** 2) - curv * 0.5, x

    def upper_lip(self):
        centre, x = self._mouth_curve()
        return (np.abs(x) <= 1.0) & (self.v < centre) & (self.v >= centre - 0.04)

    def lower_lip(self):
        centre, x = self._mouth_curve()
        return (np.abs(x) <= 1.0) & (self.v >= centre) & (self.v <= centre + 0.045)

    def glasses_frame(self):
        s = self.spec
        out = np.zeros_like(self.u, dtype=bool)
        t = 0.02
        for side in (-1, 1):
            ex, ey = self.cx + side * 0.17, self.cy - 0.05
            if s.glasses_shape == 0:
                d = np.hypot(self.u - ex, self.v - ey)
            else:
                d = np.maximum(np.abs(self.u - ex) / 1.1, np.abs(self.v - ey) * 1.25)
            out |= np.abs(d - 0.09) <= t
        bridge = (np.abs(self.u - self.cx) <= 0.07) & (np.abs(self.v - (self.cy - 0.06)) <= t)
        return out | bridge

    def beard_zone(self):
        return self.face() & (self.v >= self.cy + 0.13)


def generate_face(spec: SyntheticFaceSpec) -> Face:
    """Render one face; deterministic in ``spec`` (including its seed)."""
    spec.validate()
    g = FaceGeometry(spec)
    S = spec.size
    rng = np.random.default_rng([spec.seed, 7])

    img = np.empty((S, S, 3))
    seg = np.zeros((S, S), dtype=np.uint8)
    bg = np.array(spec.background)
    img[:] = bg + 0.08 * (g.v[..., None] - 0.5)

    def paint(region, cls, colour):
        img[region] = colour if np.ndim(colour) == 1 else colour[region]
        seg[region] = cls

    skin = np.array(spec.skin_base)
    gx, gy = spec.skin_gradient
    texture = rng.normal(0.0, 1.0, (S, S))
    texture = 0.5 * texture + 0.25 * (np.roll(texture, 1, 0) + np.roll(texture, 1, 1))
    skin_field = (skin[None, None, :]
                  + (gx * (g.u - g.cx) + gy * (g.v - g.cy))[..., None] * 2.0
                  + spec.skin_texture * texture[..., None])
    skin_field = np.clip(skin_field, 0.0, 1.0)

    paint(g.neck(), 14, skin_field * 0.85)
    paint(g.face(), 1, skin_field)
    paint(g.hair() , 17, np.array(spec.hair_color))
    paint(g.nose() & g.face(), 10, skin_field * 0.88)

    if spec.beard:
        zone = g.beard_zone()
        density = (0.35, 0.85)[spec.beard - 1]
        dots = rng.random((S, S)) < density
        darker = skin_field * (0.45 if spec.beard == 2 else 0.65)
        img[zone & dots] = darker[zone & dots]

    lip_colour = np.clip(skin * np.array([0.85, 0.45, 0.45]) + np.array([0.1, 0.0, 0.0]), 0, 1)
    paint(g.upper_lip() & g.face(), 12, lip_colour)
    paint(g.lower_lip() & g.face(), 13, lip_colour * 0.9)

    for side, cls in ((-1, 5), (1, 4)):
        paint(g.eye(side), cls, np.array([0.92, 0.92, 0.9]))
        img[g.iris(side)] = np.array([0.12, 0.08, 0.05])
    brow_colour = np.clip(np.array(spec.hair_color) * (1.0 - spec.brow_darkness) + 0.02, 0, 1)
    for side, cls in ((-1, 3), (1, 2)):
        paint(g.brow(side) & g.face(), cls, brow_colour)
    if spec.glasses:
        paint(g.glasses_frame() & g.face(), 6, np.array([0.05, 0.05, 0.06]))

    img8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    image = (img8.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)

    attr_masks = {ATTR_ID[a]: mt.attr_mask(seg, cls) for a, cls in ATTR_CLASSES.items()}
    beard_zone = g.beard_zone() & (seg == 1)
    attr_masks[ATTR_ID["beard"]] = beard_zone.astype(np.uint8)

    tone = TONE_WORDS[int(spec.brow_darkness > 0.75)]
    values = {
        "eyebrows": BROW_BUCKETS[spec.brow_bucket],
        "eyes": EYE_SHAPES[spec.eye_shape],
        "mouth": MOUTH_SHAPES[spec.mouth_shape],
        "glasses": GLASSES_SHAPES[spec.glasses_shape] if spec.glasses else None,
        "beard": BEARD_LEVELS[spec.beard],
    }
    captions = []
    for a in ATTRIBUTES:
        if values[a] is None or not attr_masks[ATTR_ID[a]].any():
            continue
        captions.append((ATTR_ID[a], caption_for(a, values[a], spec.indirect.get(a, False), tone)))
    return Face(image=image, seg=seg, captions=captions, attr_masks=attr_masks, spec=spec)


# ---------------------------------------------------------------------------
# external-role clients

def _png_b64(arr: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def to_uint8_image(image: np.ndarray) -> np.ndarray:
    """(3, H, W) in [-1, 1] -> (H, W, 3) uint8."""
    return np.clip(np.round((np.asarray(image).transpose(1, 2, 0) + 1.0) * 127.5), 0, 255).astype(np.uint8)


class CaptionerClient:
    """Produces a local caption for ``(image, region mask, template id)``."""

    def caption(self, image: np.ndarray, mask: np.ndarray, template_id: str, hint: str | None = None) -> str:
        raise NotImplementedError


class ParserClient:
    """Produces a 19-class segmentation for an image."""

    def parse(self, image: np.ndarray, hint: np.ndarray | None = None) -> np.ndarray:
        raise NotImplementedError


class EchoCaptioner(CaptionerClient):
    """Mock that returns the generator's ground-truth caption."""

    def caption(self, image, mask, template_id, hint=None):
        if hint is None:
            raise ClientError("echo captioner needs a ground-truth hint")
        return hint


class EchoParser(ParserClient):
    def parse(self, image, hint=None):
        if hint is None:
            raise ClientError("echo parser needs a ground-truth hint")
        return hint


class HTTPCaptioner(CaptionerClient):
    """POSTs ``{"image", "mask", "template_id"}`` (base64 PNGs) and reads ``{"caption"}``."""

    def __init__(self, url: str, timeout: float = 10.0):
        self.url = url
        self.timeout = timeout

    def caption(self, image, mask, template_id, hint=None):
        body = json.dumps({
            "image": _png_b64(to_uint8_image(image)),
            "mask": _png_b64((np.asarray(mask) * 255).astype(np.uint8)),
            "template_id": template_id,
        }).encode()
        req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read())
        except Exception as exc:  # network, HTTP status or JSON errors all reject the sample
            raise ClientError(f"captioner request failed: {exc}") from exc
        caption = payload.get("caption") if isinstance(payload, dict) else None
        if not isinstance(caption, str) or not caption.strip():
            raise ClientError(f"captioner returned no caption: {payload!r}")
        return caption


def default_responder(image_png: bytes, mask_png: bytes, template_id: str) -> str:
    """Deterministic stand-in reply: a grammar caption picked by hashing the request."""
    if template_id not in GRAMMAR:
        raise KeyError(template_id)
    options = sorted(GRAMMAR[template_id])
    h = int(hashlib.sha256(image_png + mask_png).hexdigest(), 16)
    return caption_for(template_id, options[h % len(options)], indirect=bool(h & 1))


class MockCaptionServer:
    """Local HTTP server speaking the captioner protocol, for tests and dry runs."""

    def __init__(self, responder=default_responder, host: str = "127.0.0.1", port: int = 0):
        responder_ = responder

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):  # noqa: N802
                try:
                    n = int(self.headers.get("Content-Length", 0))
                    req = json.loads(self.rfile.read(n))
                    cap = responder_(base64.b64decode(req["image"]), base64.b64decode(req["mask"]),
                                     req["template_id"])
                    code, payload = 200, {"caption": cap}
                except Exception as exc:
                    code, payload = 400, {"error": str(exc)}
                data = json.dumps(payload).encode()
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer((host, port), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}/caption"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


# ---------------------------------------------------------------------------
# corpus

@dataclass
class Triple:
    image_path: str
    mask_path: str
    caption: str
    attribute_id: int
    split: str

    def line(self) -> str:
        return "\t".join([self.image_path, self.mask_path, self.caption, str(self.attribute_id), self.split])


@dataclass
class Manifest:
    root: Path
    triples: list
    rejects: list = field(default_factory=list)   # [(index, message)]

    @property
    def path(self) -> Path:
        return self.root / "manifest.tsv"

    def digest(self) -> str:
        return hashlib.sha256(self.path.read_bytes()).hexdigest()

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.tsv"
        if not path.exists():
            raise LoadError(f"manifest not found: {path}")
        triples = []
        for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            parts = line.split("\t")
            if len(parts) != 5:
                raise LoadError(f"{path}:{n}: expected 5 tab-separated fields, got {len(parts)}")
            triples.append(Triple(parts[0], parts[1], parts[2], int(parts[3]), parts[4]))
        rejects = []
        rpath = path.parent / "rejects.tsv"
        if rpath.exists():
            for line in rpath.read_text(encoding="utf-8").splitlines():
                idx, msg = line.split("\t", 1)
                rejects.append((int(idx), msg))
        return cls(root=path.parent, triples=triples, rejects=rejects)


def split_of(index: int) -> str:
    return "eval" if index % 11 == 10 else "train"


def precise_path_for(mask_path: str) -> str:
    return mask_path.replace("masks/", "precise/", 1)


def choose_attribute(face: Face, rng: np.random.Generator) -> int:
    ids = [a for a, _ in face.captions]
    w = np.array([ATTR_WEIGHTS[ATTRIBUTES[a]] for a in ids])
    return int(ids[rng.choice(len(ids), p=w / w.sum())])


def build_sample(index: int, seed: int, size: int, captioner: CaptionerClient, parser: ParserClient,
                 mask_aug: str) -> tuple[Face, int, str, np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, index])
    spec = SyntheticFaceSpec.sample(int(rng.integers(2 ** 31)), size=size)
    face = generate_face(spec)
    seg = parser.parse(face.image, hint=face.seg)
    seg = np.asarray(seg)
    if seg.shape != face.seg.shape or seg.max(initial=0) >= mt.NUM_CLASSES:
        raise ClientError("parser returned an invalid segmentation")
    attr = choose_attribute(face, rng)
    name = ATTRIBUTES[attr]
    precise = face.attr_masks[attr] if name == "beard" else mt.attr_mask(seg, ATTR_CLASSES[name])
    if not precise.any():
        raise ClientError(f"parser found no {name} region")
    hint = dict(face.captions)[attr]
    caption = captioner.caption(face.image, precise, name, hint=hint)
    coarse = mt.augment_mask(precise, mask_aug, rng)
    return face, attr, caption, precise, coarse


def build_corpus(n: int, seed: int, out_dir, captioner: CaptionerClient | None = None,
                 parser: ParserClient | None = None, mask_aug: str = "mixed", size: int = 32) -> Manifest:
    """Generate ``n`` triples under ``out_dir``; failures go to ``rejects.tsv``."""
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    captioner = captioner or EchoCaptioner()
    parser = parser or EchoParser()
    root = Path(out_dir)
    for sub in ("images", "masks", "precise", "seg"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    triples, rejects = [], []
    for i in range(n):
        try:
            face, attr, caption, precise, coarse = build_sample(i, seed, size, captioner, parser, mask_aug)
        except ClientError as exc:
            log.warning("sample %d rejected: %s", i, exc)
            rejects.append((i, str(exc).replace("\t", " ").replace("\n", " ")))
            continue
        name = f"{i:05d}.png"
        Image.fromarray(to_uint8_image(face.image)).save(root / "images" / name)
        write_mask_png(root / "masks" / name, coarse)
        write_mask_png(root / "precise" / name, precise)
        Image.fromarray(face.seg).save(root / "seg" / name)
        triples.append(Triple(f"images/{name}", f"masks/{name}", " ".join(caption.split()), attr, split_of(i)))
    manifest = Manifest(root=root, triples=triples, rejects=rejects)
    manifest.path.write_text("".join(t.line() + "\n" for t in triples), encoding="utf-8")
    (root / "rejects.tsv").write_text("".join(f"{i}\t{m}\n" for i, m in rejects), encoding="utf-8")
    return manifest


@dataclass
class Sample:
    z0: np.ndarray          # (3, H, W) float32 in [-1, 1]
    caption: str
    precise_mask: np.ndarray
    coarse_mask: np.ndarray
    attribute_id: int


def write_mask_png(path, mask: np.ndarray) -> None:
    """8-bit grayscale PNG, 255 inside the mask."""
    Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255).save(path)


def read_mask_png(path) -> np.ndarray:
    return (np.asarray(Image.open(path)) > 127).astype(np.uint8)


def load_corpus(manifest: Manifest | str | Path, split: str | None = "train",
                shuffle_seed: int | None = None) -> list[Sample]:
    """Load samples of one split (``None`` for all); optional seeded shuffle."""
    if not isinstance(manifest, Manifest):
        manifest = Manifest.read(manifest)
    samples = []
    for t in manifest.triples:
        if split is not None and t.split != split:
            continue
        paths = [manifest.root / t.image_path, manifest.root / t.mask_path,
                 manifest.root / precise_path_for(t.mask_path)]
        for p in paths:
            if not p.exists():
                raise LoadError(f"triple {t.image_path!r}: missing file {p}")
        img = np.asarray(Image.open(paths[0]).convert("RGB"), dtype=np.float32)
        samples.append(Sample(z0=img.transpose(2, 0, 1) / 127.5 - 1.0, caption=t.caption,
                              precise_mask=read_mask_png(paths[2]), coarse_mask=read_mask_png(paths[1]),
                              attribute_id=t.attribute_id))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(samples))
        samples = [samples[i] for i in order]
    return samples
