"""Command-line entry point: ``nodeloc simulate|localize|evaluate``.

Experiments are described by one declarative key-value config file with
[sections]; every command is deterministic given the config seed. Exit
codes: 0 success, 2 config error, 3 data error.
"""

import argparse
import os
import sys

import numpy as np

from . import svgplot
from .floorid import NodeDatabaseError
from .geometry import CameraIntrinsics, GeometryError
from .gridpose import NodeGeometry
from .imaging import ImagingError
from .pipeline import (
    Pipeline,
    PipelineConfig,
    compute_metrics,
    fixes_from_csv_text,
    fixes_to_csv_text,
    trace_to_csv_text,
)
from .simulator import (
    Dataset,
    RenderSettings,
    Scenario,
    Scene,
    SimulatorError,
    WALK_SPEED,
    aisle_scene,
    generate_trajectory,
    node_fully_visible,
    read_dataset,
    render_frame,
    render_reference_image,
    synth_odometry,
    write_dataset,
)


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (parser, default)
_SCHEMA = {
    "experiment": {
        "seed": (int, 0),
        "name": (str, "experiment"),
    },
    "scenario": {
        "kind": (str, "slow-walk"),
        "duration_s": (float, 20.0),
        "frame_rate_hz": (float, 5.0),
        "walk_height_m": (float, 1.0),
        "crouch_height_m": (float, 0.6),
    },
    "scene": {
        "node_count": (int, 5),
        "node_spacing_m": (float, 1.5),
        "floor_albedo": (float, 170.0),
        "node_disc_radius_m": (float, 0.13),
        "blob_radius_m": (float, 0.011),
        "marker_radius_m": (float, 0.015),
        "obstacles": (_bool, True),
    },
    "geometry": {
        "pitch_m": (float, 0.05),
        "code_size_m": (float, 0.015),
    },
    "camera": {
        "fx": (float, 600.0),
        "fy": (float, 600.0),
        "cx": (float, 320.0),
        "cy": (float, 240.0),
        "k1": (float, -0.05),
        "k2": (float, 0.0),
        "k3": (float, 0.0),
        "p1": (float, 0.0),
        "p2": (float, 0.0),
        "width": (int, 640),
        "height": (int, 480),
    },
    "render": {
        "lux": (float, 300.0),
        "motion_blur": (float, 0.05),
        "noise_sigma": (float, 1.5),
    },
    "odometry": {
        "sigma_pos": (float, 0.02),
        "sigma_yaw": (float, 0.01),
        "rate_hz": (float, 20.0),
    },
    "pipeline": {
        "blur_alpha": (float, 0.2),
        "kernel_size_px": (int, 61),
        "threshold_factor": (float, 0.8),
        "min_features": (int, 10),
        "merge_dist_px": (float, 150.0),
        "roi_half_extent_px": (int, 160),
        "decode_budget_ms": (float, 50.0),
        "prior_age_limit_s": (float, 10.0),
        "max_ident_dist_m": (float, 0.75),
        "opening_radius_px": (int, 2),
        "opening_iterations": (int, 3),
        "max_keypoints": (int, 500),
        "decode_enabled": (_bool, True),
        "use_prior_filter": (_bool, True),
        "reanchor_prior": (_bool, True),
        "reference_height_m": (float, 0.0),  # 0 = use the scenario height
    },
}


class ExperimentConfig:
    """Typed view of a parsed config file; unset keys take defaults."""

    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, section_key):
        section, key = section_key
        return self.values[section][key]

    def scenario(self) -> Scenario:
        s = self.values["scenario"]
        return Scenario(
            kind=s["kind"],
            duration_s=s["duration_s"],
            frame_rate_hz=s["frame_rate_hz"],
            walk_height_m=s["walk_height_m"],
            crouch_height_m=s["crouch_height_m"],
        )

    def camera(self) -> CameraIntrinsics:
        c = self.values["camera"]
        return CameraIntrinsics(
            fx_px=c["fx"], fy_px=c["fy"], cx_px=c["cx"], cy_px=c["cy"],
            radial_coeffs=(c["k1"], c["k2"], c["k3"]),
            tangential_coeffs=(c["p1"], c["p2"]),
            width_px=c["width"], height_px=c["height"],
        )

    def node_geometry(self) -> NodeGeometry:
        g = self.values["geometry"]
        return NodeGeometry(pitch_m=g["pitch_m"], code_size_m=g["code_size_m"])

    def render_settings(self) -> RenderSettings:
        r = self.values["render"]
        return RenderSettings(
            illumination_lux=r["lux"],
            motion_blur=r["motion_blur"],
            noise_sigma=r["noise_sigma"],
        )

    def pipeline_config(self) -> PipelineConfig:
        p = dict(self.values["pipeline"])
        p.pop("reference_height_m")
        return PipelineConfig(**p)

    def reference_height(self) -> float:
        h = self.values["pipeline"]["reference_height_m"]
        if h > 0:
            return h
        s = self.values["scenario"]
        return s["crouch_height_m"] if s["kind"] == "crouch-walk" else s["walk_height_m"]

    def scene(self) -> Scene:
        s = self.values["scene"]
        scenario = self.scenario()
        speed = WALK_SPEED.get(scenario.kind, 0.0)
        extent = abs(speed) * scenario.duration_s
        count = max(s["node_count"], int(np.ceil(extent / s["node_spacing_m"])) + 2)
        direction = -1.0 if speed < 0 else 1.0
        return aisle_scene(
            n_nodes=count,
            spacing_m=s["node_spacing_m"],
            direction=direction,
            with_obstacles=s["obstacles"],
            geometry=self.node_geometry(),
            floor_albedo=s["floor_albedo"],
            node_disc_radius_m=s["node_disc_radius_m"],
            blob_radius_m=s["blob_radius_m"],
            marker_radius_m=s["marker_radius_m"],
        )


def parse_config_text(text: str) -> ExperimentConfig:
    values = {sec: {key: default for key, (_, default) in keys.items()}
              for sec, keys in _SCHEMA.items()}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith(";"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SCHEMA:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in _SCHEMA[section]:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{section}]")
        parser = _SCHEMA[section][key][0]
        try:
            values[section][key] = parser(val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from exc
    return ExperimentConfig(values)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# manifest round trip for scene parameters


def _scene_manifest(cfg: ExperimentConfig) -> dict:
    out = {"seed": cfg["experiment", "seed"], "name": cfg["experiment", "name"]}
    for section in ("scenario", "scene", "geometry", "render", "odometry"):
        for key, value in cfg.values[section].items():
            out[f"{section}.{key}"] = value
    return out


def scene_from_manifest(manifest: dict, dataset: Dataset) -> Scene:
    def get(key, parser, default):
        return parser(manifest[key]) if key in manifest else default

    geometry = NodeGeometry(
        pitch_m=get("geometry.pitch_m", float, 0.05),
        code_size_m=get("geometry.code_size_m", float, 0.015),
    )
    obstacles = ()
    if get("scene.obstacles", _bool, True):
        xs = [n.world_xy_m[0] for n in dataset.nodes]
        x0, x1 = min(xs) - 2.0, max(xs) + 2.0
        obstacles = ((x0, 1.0, x1, 1.8), (x0, -1.8, x1, -1.0))
    return Scene(
        nodes=dataset.nodes,
        geometry=geometry,
        floor_albedo=get("scene.floor_albedo", float, 170.0),
        obstacles=obstacles,
        node_disc_radius_m=get("scene.node_disc_radius_m", float, 0.13),
        blob_radius_m=get("scene.blob_radius_m", float, 0.011),
        marker_radius_m=get("scene.marker_radius_m", float, 0.015),
    )


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: ExperimentConfig, out_dir) -> str:
    seed = cfg["experiment", "seed"]
    scene = cfg.scene()
    scenario = cfg.scenario()
    k = cfg.camera()
    settings = cfg.render_settings()
    trajectory = generate_trajectory(scene, scenario, seed)
    frames = []
    for i, (t, pose) in enumerate(trajectory):
        pose_next = trajectory[i + 1][1] if i + 1 < len(trajectory) else pose
        frames.append(
            render_frame(
                scene, pose, k, settings,
                pose_next=pose_next, frame_seed=seed * 100003 + i,
            )
        )
    odo = cfg.values["odometry"]
    odometry = synth_odometry(
        trajectory,
        sigma_pos=odo["sigma_pos"],
        sigma_yaw=odo["sigma_yaw"],
        seed=seed + 1,
        rate_hz=odo["rate_hz"],
    )
    manifest_path = write_dataset(
        out_dir,
        frames,
        [t for t, _ in trajectory],
        [p for _, p in trajectory],
        odometry,
        scene.nodes,
        k,
        manifest_extra=_scene_manifest(cfg),
    )
    print(manifest_path)
    return manifest_path


def _build_pipeline(cfg: ExperimentConfig, dataset: Dataset) -> Pipeline:
    scene = scene_from_manifest(dataset.manifest, dataset)
    reference = render_reference_image(
        scene, dataset.intrinsics, height_m=cfg.reference_height(),
        lux=float(dataset.manifest.get("render.lux", 300.0)),
    )
    anchor = float(dataset.odometry.times_s[0]) if dataset.odometry.times_s.size else None
    return Pipeline(
        cfg.pipeline_config(),
        dataset.intrinsics,
        dataset.nodes,
        scene.geometry,
        reference,
        anchor_time_s=anchor,
    )


def cmd_localize(cfg: ExperimentConfig, dataset_dir, out_dir):
    dataset = read_dataset(dataset_dir)
    pipeline = _build_pipeline(cfg, dataset)
    fixes = []
    for i, t in enumerate(dataset.frame_times_s):
        img = dataset.load_frame(i)
        prior = dataset.odometry.pose_at(float(t))
        fix = pipeline.process_frame(img, float(t), prior)
        if fix is not None:
            fixes.append(fix)
    os.makedirs(out_dir, exist_ok=True)
    fixes_path = os.path.join(out_dir, "fixes.csv")
    with open(fixes_path, "w", encoding="ascii") as fh:
        fh.write(fixes_to_csv_text(fixes))
    with open(os.path.join(out_dir, "trace.csv"), "w", encoding="ascii") as fh:
        fh.write(trace_to_csv_text(pipeline.trace))
    med = np.median(pipeline.frame_times_ms) if pipeline.frame_times_ms else float("nan")
    print(
        f"{len(fixes)} fixes from {len(dataset.frame_times_s)} frames "
        f"(median {med:.1f} ms/frame) -> {fixes_path}"
    )
    return fixes_path


def cmd_evaluate(fixes_path, dataset_dir, out_dir):
    dataset = read_dataset(dataset_dir)
    try:
        with open(fixes_path, "r", encoding="ascii") as fh:
            fixes = fixes_from_csv_text(fh.read())
    except OSError as exc:
        raise DataError(f"cannot read fixes: {exc}") from exc
    scene = scene_from_manifest(dataset.manifest, dataset)
    visible = [
        node_fully_visible(scene, pose, dataset.intrinsics) is not None
        for pose in dataset.truth_poses
    ]
    metrics = compute_metrics(
        fixes,
        dataset.frame_times_s,
        dataset.truth_poses,
        frame_times_s=dataset.frame_times_s,
        visible_flags=visible,
    )
    os.makedirs(out_dir, exist_ok=True)
    err = metrics.errors_m
    rows = [
        ("n_fixes", f"{metrics.n_fixes}"),
        ("n_frames", f"{len(dataset.frame_times_s)}"),
        ("n_visible_frames", f"{int(np.sum(visible))}"),
        ("fix_rate_hz", f"{metrics.fix_rate_hz:.6f}"),
        ("disambiguation_rate", f"{metrics.disambiguation_rate:.6f}"),
        ("error_rms_m", f"{np.sqrt(np.mean(err ** 2)):.6f}" if err.size else "nan"),
        ("error_p95_m", f"{np.percentile(err, 95):.6f}" if err.size else "nan"),
        ("error_max_m", f"{np.max(err):.6f}" if err.size else "nan"),
        ("elapsed_max_s", f"{np.max(metrics.elapsed_s):.6f}" if err.size else "nan"),
    ]
    metrics_path = os.path.join(out_dir, "metrics.csv")
    with open(metrics_path, "w", encoding="ascii") as fh:
        fh.write("metric,value\n")
        for key, value in rows:
            fh.write(f"{key},{value}\n")
    with open(os.path.join(out_dir, "errors.csv"), "w", encoding="ascii") as fh:
        fh.write("t,error_m,elapsed_s\n")
        for f, e, el in zip(fixes, metrics.errors_m, metrics.elapsed_s):
            fh.write(f"{f.timestamp_s:.9f},{e:.9f},{el:.9f}\n")

    truth_t = [float(t) for t in dataset.frame_times_s]
    fix_t = [f.timestamp_s for f in fixes]
    for axis, idx in (("x", 0), ("y", 1)):
        svgplot.line_chart(
            os.path.join(out_dir, f"position_{axis}.svg"),
            f"{axis} position vs ground truth",
            "time [s]",
            f"{axis} [m]",
            [
                ("truth", truth_t, [p.translation[idx] for p in dataset.truth_poses]),
                ("fixes", fix_t, [f.pose.translation[idx] for f in fixes]),
            ],
        )
    svgplot.line_chart(
        os.path.join(out_dir, "error.svg"),
        "planar position error",
        "time [s]",
        "error [m]",
        [("error", fix_t, list(metrics.errors_m))],
    )
    svgplot.line_chart(
        os.path.join(out_dir, "elapsed.svg"),
        "time since previous fix",
        "time [s]",
        "elapsed [s]",
        [("elapsed", fix_t, list(metrics.elapsed_s))],
    )
    print(metrics_path)
    return metrics_path


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="nodeloc",
        description="Ground-node visual localization: simulate, localize, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_sim = sub.add_parser("simulate", help="render a synthetic dataset")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--out", required=True)
    p_loc = sub.add_parser("localize", help="run the pipeline over a dataset")
    p_loc.add_argument("--config", required=True)
    p_loc.add_argument("--dataset", required=True)
    p_loc.add_argument("--out", required=True)
    p_eva = sub.add_parser("evaluate", help="score fixes against ground truth")
    p_eva.add_argument("--fixes", required=True)
    p_eva.add_argument("--dataset", required=True)
    p_eva.add_argument("--out", required=True)
    p_eva.add_argument("--config", required=False)
    args = parser.parse_args(argv)

    try:
        if args.command == "simulate":
            cfg = load_config(args.config)
            cmd_simulate(cfg, args.out)
        elif args.command == "localize":
            cfg = load_config(args.config)
            cmd_localize(cfg, args.dataset, args.out)
        else:
            cmd_evaluate(args.fixes, args.dataset, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (
        DataError,
        SimulatorError,
        GeometryError,
        ImagingError,
        NodeDatabaseError,
        OSError,
        ValueError,
    ) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
