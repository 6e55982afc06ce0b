"""On-disk formats and the sequence bundle.

A bundle directory holds everything one multi-view sequence needs:

    manifest.txt            id / fps / frame count / view names
    calib/<view>.txt        pinhole calibration (crossview.camera format)
    anno/<view>.txt         per-frame `frame visible x y w h [attr flags]`
    bev.txt                 optional `frame x y` ground positions, meters
    features/<view>/NNNNNN.f64   optional per-frame feature-map snapshots

Track runs are line-delimited records in one file: box lines
`frame view x y w h score visible` interleaved with trajectory lines
`frame BEV x y`. All text is UTF-8 with `#` comments; floats are written
with six decimals so a write -> read -> write cycle is byte-stable.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from crossview import camera as cammod
from crossview import tensorops
from crossview.boxes import BBox2D
from crossview.errors import ContractError, ParseError
from crossview.pipeline import BoxRecord, TrackRun

MANUAL_ATTRS = ("BC", "MB", "POC", "FOC", "OV", "DEF")


def _fmt(x):
    return f"{x:.6f}"


def _float(tok, path, line, col):
    try:
        return float(tok)
    except ValueError:
        raise ParseError("malformed-number", f"not a number: {tok!r}",
                         path=str(path), line=line, column=col) from None


def _int(tok, path, line, col):
    try:
        return int(tok)
    except ValueError:
        raise ParseError("malformed-number", f"not an integer: {tok!r}",
                         path=str(path), line=line, column=col) from None


def _data_lines(path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line


# -- annotations --------------------------------------------------------------

def save_annotations(path, track, manual_attrs=None):
    """One line per frame; optional manual attribute flag columns."""
    names = list(manual_attrs.keys()) if manual_attrs else []
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# frame visible x y w h" + (" " + " ".join(names) if names else "") + "\n")
        if names:
            fh.write("# attrs: " + " ".join(names) + "\n")
        for i, box in enumerate(track):
            cols = [str(i), str(int(box.visible)), _fmt(box.x), _fmt(box.y),
                    _fmt(box.w), _fmt(box.h)]
            cols += [str(int(bool(manual_attrs[n][i]))) for n in names]
            fh.write(" ".join(cols) + "\n")


def load_annotations(path):
    """Returns (boxes, manual_attrs dict of bool arrays)."""
    attr_names = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            stripped = raw.strip()
            if stripped.startswith("# attrs:"):
                attr_names = stripped[len("# attrs:"):].split()
    boxes, attr_cols = [], []
    for lineno, line in _data_lines(path):
        toks = line.split()
        if len(toks) != 6 + len(attr_names):
            raise ParseError("malformed-annotation",
                             f"expected {6 + len(attr_names)} columns, got {len(toks)}",
                             path=str(path), line=lineno)
        frame = _int(toks[0], path, lineno, 1)
        if frame != len(boxes):
            raise ParseError("malformed-annotation",
                             f"frame index {frame} out of order (expected {len(boxes)})",
                             path=str(path), line=lineno)
        visible = bool(_int(toks[1], path, lineno, 2))
        vals = [_float(t, path, lineno, i + 3) for i, t in enumerate(toks[2:6])]
        boxes.append(BBox2D(vals[0], vals[1], vals[2], vals[3], visible=visible))
        attr_cols.append([bool(_int(t, path, lineno, 7 + i))
                          for i, t in enumerate(toks[6:])])
    attrs = {}
    for j, name in enumerate(attr_names):
        attrs[name] = np.array([row[j] for row in attr_cols], dtype=bool)
    return boxes, attrs


# -- bundle -------------------------------------------------------------------

@dataclass
class SequenceBundle:
    path: Path
    sequence_id: str
    fps: float
    views: list
    n_frames: int
    cameras: list                  # CameraModel per view, or None
    annotations: list              # per view: list of BBox2D
    manual_attrs: list             # per view: dict name -> bool array
    bev_track: np.ndarray          # (n_frames, 2) meters, or None
    has_features: bool
    _feature_cache: dict = field(default_factory=dict, repr=False)

    def feature_map(self, view, frame):
        if not self.has_features:
            raise ContractError("missing-features",
                                f"bundle {self.sequence_id} has no feature maps")
        key = (view, frame)
        if key not in self._feature_cache:
            fp = self.path / "features" / self.views[view] / f"{frame:06d}.f64"
            self._feature_cache[key] = tensorops.load_array(fp)
        return self._feature_cache[key]


def save_bundle(path, sequence_id, fps, view_names, cameras, annotations,
                bev_track=None, feature_maps=None, manual_attrs=None):
    """Write a bundle directory; feature_maps is per-view lists of arrays."""
    path = Path(path)
    (path / "calib").mkdir(parents=True, exist_ok=True)
    (path / "anno").mkdir(exist_ok=True)
    n_frames = len(annotations[0]) if annotations else 0
    with open(path / "manifest.txt", "w", encoding="utf-8") as fh:
        fh.write("# sequence manifest\n")
        fh.write(f"id: {sequence_id}\n")
        fh.write(f"fps: {_fmt(fps)}\n")
        fh.write(f"frames: {n_frames}\n")
        fh.write("views: " + " ".join(view_names) + "\n")
    for name, cam, track in zip(view_names, cameras, annotations):
        cammod.save_calibration(path / "calib" / f"{name}.txt", cam)
        attrs = manual_attrs[view_names.index(name)] if manual_attrs else None
        save_annotations(path / "anno" / f"{name}.txt", track, attrs)
    if bev_track is not None:
        with open(path / "bev.txt", "w", encoding="utf-8") as fh:
            fh.write("# frame x y (meters)\n")
            for i, (x, y) in enumerate(bev_track):
                fh.write(f"{i} {_fmt(x)} {_fmt(y)}\n")
    if feature_maps is not None:
        for name, maps in zip(view_names, feature_maps):
            vdir = path / "features" / name
            vdir.mkdir(parents=True, exist_ok=True)
            for i, fmap in enumerate(maps):
                tensorops.save_array(vdir / f"{i:06d}.f64", fmap)


def load_bundle(path, require_calibration=False):
    path = Path(path)
    manifest = path / "manifest.txt"
    if not manifest.exists():
        raise ParseError("missing-manifest", f"no manifest.txt under {path}", path=str(path))
    fields = {}
    for lineno, line in _data_lines(manifest):
        if ":" not in line:
            raise ParseError("malformed-manifest", "expected 'key: value'",
                             path=str(manifest), line=lineno)
        key, _, rest = line.partition(":")
        fields[key.strip()] = rest.strip()
    for key in ("id", "fps", "frames", "views"):
        if key not in fields:
            raise ParseError("malformed-manifest", f"missing key {key}", path=str(manifest))
    views = fields["views"].split()
    n_frames = _int(fields["frames"], manifest, 0, 0)

    annotations, manual, cameras = [], [], []
    for name in views:
        anno_path = path / "anno" / f"{name}.txt"
        if not anno_path.exists():
            raise ParseError("missing-annotation", f"no annotation file for view {name}",
                             path=str(anno_path))
        boxes, attrs = load_annotations(anno_path)
        annotations.append(boxes)
        manual.append(attrs)
        calib_path = path / "calib" / f"{name}.txt"
        if calib_path.exists():
            cameras.append(cammod.load_calibration(calib_path))
        elif require_calibration:
            raise ParseError("missing-calibration", f"no calibration for view {name}",
                             path=str(calib_path))
        else:
            cameras.append(None)

    counts = {name: len(track) for name, track in zip(views, annotations)}
    bad = [(a, b) for a in views for b in views if counts[a] != counts[b]]
    if bad:
        a, b = bad[0]
        raise ParseError("frame-count-mismatch",
                         f"views {a} ({counts[a]} frames) and {b} ({counts[b]} frames) disagree",
                         path=str(path))
    if annotations and counts[views[0]] != n_frames:
        raise ParseError("frame-count-mismatch",
                         f"manifest says {n_frames} frames, view {views[0]} has {counts[views[0]]}",
                         path=str(manifest))

    bev_track = None
    bev_path = path / "bev.txt"
    if bev_path.exists():
        rows = []
        for lineno, line in _data_lines(bev_path):
            toks = line.split()
            if len(toks) != 3:
                raise ParseError("malformed-bev", "expected 'frame x y'",
                                 path=str(bev_path), line=lineno)
            rows.append((_float(toks[1], bev_path, lineno, 2),
                         _float(toks[2], bev_path, lineno, 3)))
        bev_track = np.array(rows)

    if all(c is None for c in cameras):
        cameras = None
    return SequenceBundle(
        path=path, sequence_id=fields["id"], fps=float(fields["fps"]), views=views,
        n_frames=n_frames, cameras=cameras, annotations=annotations, manual_attrs=manual,
        bev_track=bev_track, has_features=(path / "features").is_dir(),
    )


# -- track records --------------------------------------------------------------

def save_track_run(path, run):
    """Line-delimited records: `frame view x y w h score visible` plus
    `frame BEV x y` trajectory lines, grouped per frame."""
    bev_by_frame = {f: (x, y) for f, x, y in run.bev_track}
    by_frame = {}
    for rec in run.records:
        by_frame.setdefault(rec.frame, []).append(rec)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# crossview track records\n")
        fh.write("# frame view x y w h score visible\n")
        fh.write("# frame BEV x y\n")
        for frame in sorted(set(by_frame) | set(bev_by_frame)):
            for rec in by_frame.get(frame, ()):
                b = rec.box
                fh.write(f"{frame} {rec.view} {_fmt(b.x)} {_fmt(b.y)} {_fmt(b.w)} "
                         f"{_fmt(b.h)} {_fmt(rec.score)} {int(b.visible)}\n")
            if frame in bev_by_frame:
                x, y = bev_by_frame[frame]
                fh.write(f"{frame} BEV {_fmt(x)} {_fmt(y)}\n")


def load_track_run(path):
    """Inverse of save_track_run; the mode comment is not round-tripped."""
    records, bev = [], []
    for lineno, line in _data_lines(path):
        toks = line.split()
        frame = _int(toks[0], path, lineno, 1)
        if len(toks) >= 2 and toks[1] == "BEV":
            if len(toks) != 4:
                raise ParseError("malformed-record", "BEV line needs 'frame BEV x y'",
                                 path=str(path), line=lineno)
            bev.append((frame, _float(toks[2], path, lineno, 3),
                        _float(toks[3], path, lineno, 4)))
            continue
        if len(toks) != 8:
            raise ParseError("malformed-record", f"expected 8 columns, got {len(toks)}",
                             path=str(path), line=lineno)
        view = _int(toks[1], path, lineno, 2)
        vals = [_float(t, path, lineno, i + 3) for i, t in enumerate(toks[2:7])]
        visible = bool(_int(toks[7], path, lineno, 8))
        records.append(BoxRecord(frame=frame, view=view,
                                 box=BBox2D(vals[0], vals[1], vals[2], vals[3], visible=visible),
                                 score=vals[4]))
    return TrackRun(mode="loaded", records=records, bev_track=bev, stats={})


def records_to_view_tracks(run, n_frames, n_views):
    """Per-view box lists aligned to frames; missing entries are invisible."""
    tracks = [[BBox2D(0.0, 0.0, 0.0, 0.0, visible=False) for _ in range(n_frames)]
              for _ in range(n_views)]
    for rec in run.records:
        if 0 <= rec.frame < n_frames and 0 <= rec.view < n_views:
            tracks[rec.view][rec.frame] = rec.box
    return tracks


def export_scene(scene, path, sequence_id="scene", fps=30.0, features=True):
    """Render a simulator scene straight into a bundle directory.

    Feature maps are written frame by frame to keep memory flat.
    """
    from crossview.scenesim import render_frame  # local import: optional heavy dep path

    path = Path(path)
    view_names = [f"cam{i}" for i in range(len(scene.cameras))]
    n_frames = scene.cfg.n_frames
    annotations = [[] for _ in view_names]
    bev_track = []
    if features:
        for name in view_names:
            (path / "features" / name).mkdir(parents=True, exist_ok=True)
    for t in range(n_frames):
        frame = render_frame(scene, t)
        bev_track.append((frame.ground_xy[0], frame.ground_xy[1]))
        for k, view in enumerate(frame.views):
            annotations[k].append(view.box)
            if features:
                tensorops.save_array(path / "features" / view_names[k] / f"{t:06d}.f64",
                                     view.feature_map)
    save_bundle(path, sequence_id, fps, view_names, scene.cameras, annotations,
                bev_track=np.array(bev_track) if bev_track else None)
    return path


# -- miscellaneous emitters -------------------------------------------------------

def write_pgm16(path, values):
    """Dump a [0,1] map as a 16-bit binary portable graymap (P5)."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    pix = np.round(v * 65535.0).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{v.shape[1]} {v.shape[0]}\n65535\n".encode("ascii"))
        fh.write(pix.tobytes())
