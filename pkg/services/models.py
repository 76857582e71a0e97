"""
Pydantic models for stage configuration and reports.
"""

from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from utils.config import CFG
from utils.errors import ConfigError


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DepthConfig(_Section):
    jump_threshold: float = Field(0.05, gt=0)
    perspective_correction: bool = True
    depth_smoothing: float = Field(0.0, ge=0)
    depth_format: Literal["pfm", "png"] = "pfm"


class RegistrationConfig(_Section):
    mode: Literal["features", "poses"] = "features"
    ransac_iters: int = Field(1000, ge=1)
    inlier_thresh: float = Field(0.005, gt=0)
    icp_iters: int = Field(50, ge=0)
    icp_eps: float = Field(1e-7, ge=0)
    icp_max_points: int = Field(20000, ge=0)
    icp_max_distance: float = Field(0.02, gt=0)
    min_overlap: float = Field(0.2, ge=0, le=1)
    max_overlap_rms: float = Field(0.0075, gt=0)
    max_match_distance: float = Field(0.7, gt=0)
    min_matches: int = Field(3, ge=3)
    voxel_thin: float = Field(0.0, ge=0)
    octaves: int = Field(4, ge=1, le=8)
    scales_per_octave: int = Field(3, ge=1)
    contrast_threshold: float = Field(0.03, ge=0)
    edge_ratio: float = Field(10.0, gt=1)


class PoissonConfig(_Section):
    grid_res: int = Field(128, ge=16, le=512)
    screening_alpha: float = Field(4.0, ge=0)
    cg_tol: float = Field(1e-6, gt=0, lt=1)
    cg_max_iters: int = Field(4000, ge=1)
    iso_offset: float = 0.0
    interior: Literal["below", "above"] = "below"
    crop_margin: float = Field(0.003, ge=0)
    mirror_support: bool = True
    clip_support: bool = True


class VolumeConfig(_Section):
    detect_plane: bool = True
    plane_iters: int = Field(1000, ge=1)
    plane_thresh: float = Field(0.005, gt=0)
    min_plane_fraction: float = Field(0.1, gt=0, le=1)
    gap_tolerance: float | None = Field(None, gt=0)
    flow: Literal["x", "y", "z"] = "x"
    coverage_cells: float = Field(3.0, gt=0)
    max_unsupported_fraction: float = Field(0.25, ge=0, le=1)


class SynthConfig(_Section):
    ring_count: int = Field(8, ge=1)
    ring_radius: float = Field(0.6, gt=0)
    ring_elevation: float = Field(35.0, gt=-90, lt=90)
    ring_target: tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise_sigma: float = Field(0.0, ge=0)
    outlier_fraction: float = Field(0.0, ge=0, lt=1)
    width: int = Field(320, ge=8)
    height: int = Field(240, ge=8)
    fu: float = Field(300.0, gt=0)
    fv: float = Field(300.0, gt=0)
    cu: float | None = None
    cv: float | None = None

    @field_validator("ring_target", mode="before")
    @classmethod
    def _split_vector(cls, value: Any) -> Any:
        if isinstance(value, str):
            return tuple(float(p) for p in value.replace(",", " ").split())
        return value


SECTIONS = {"depth": DepthConfig, "registration": RegistrationConfig, "poisson": PoissonConfig, "volume": VolumeConfig, "synth": SynthConfig}


class PipelineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    input_dir: Path | None = None
    output_dir: Path | None = None
    intrinsics: Path | None = None
    plane: Path | None = None
    seed: int = Field(0, ge=0)
    threads: int = Field(1, ge=1)
    strict: bool = False
    dump_field: bool = False
    depth: DepthConfig = Field(default_factory=DepthConfig)
    registration: RegistrationConfig = Field(default_factory=RegistrationConfig)
    poisson: PoissonConfig = Field(default_factory=PoissonConfig)
    volume: VolumeConfig = Field(default_factory=VolumeConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)

    @classmethod
    def from_flat(cls, *layers: dict[str, Any]) -> "PipelineConfig":
        """
        Build a config from flat key-value layers; later layers win.

        Keys are routed to the section declaring a field of that name. ``None`` values
        are skipped so that unset CLI flags do not override lower layers.

        Raises:
            ConfigError: On unknown keys or values outside their documented range
        """
        top: dict[str, Any] = {}
        sections: dict[str, dict[str, Any]] = {name: {} for name in SECTIONS}
        for layer in layers:
            for raw_key, value in layer.items():
                if value is None:
                    continue
                key = raw_key.strip().lower().replace("-", "_")
                if key in cls.model_fields and key not in SECTIONS:
                    top[key] = value
                    continue
                section = next((name for name, model in SECTIONS.items() if key in model.model_fields), None)
                if section is None:
                    raise ConfigError(f"unknown configuration key: {raw_key}")
                sections[section][key] = value
        try:
            return cls(**top, **{name: SECTIONS[name](**values) for name, values in sections.items()})
        except ValidationError as e:
            first = e.errors()[0]
            location = ".".join(str(p) for p in first["loc"])
            raise ConfigError(f"invalid configuration value for {location}: {first['msg']}") from e


def environment_defaults() -> dict[str, Any]:
    """Stage parameters taken from CFG (RGBDVOL_* environment variables)."""
    keys = ("seed", "threads", "grid_res", "screening_alpha", "cg_tol", "cg_max_iters", "ransac_iters", "inlier_thresh", "icp_iters", "icp_eps", "jump_threshold", "depth_format")
    return {k: CFG[k] for k in keys}


class ViewSummary(BaseModel):
    index: int
    points: int
    placement: Literal["reference", "pose", "aligned"] = "reference"
    reference: int | None = None
    inliers: int | None = None
    icp_rms: float | None = None
    overlap_rms: float | None = None


class VolumeSummary(BaseModel):
    volume_m3: float
    volume_cm3: float
    volume_tetrahedra_m3: float
    boundary_edges: int
    support_gap_m: float | None = None
    gap_tolerance_m: float
    reliable: bool
    flagged_vertices: int
    degenerate_faces: int
    unsupported_fraction: float | None = None
    warnings: list[str] = Field(default_factory=list)

    def text_lines(self) -> list[str]:
        gap = "n/a" if self.support_gap_m is None else f"{self.support_gap_m:.6g} m"
        lines = [
            f"volume: {self.volume_m3:.9g} m^3 ({self.volume_cm3:.6g} cm^3)",
            f"volume (tetrahedra): {self.volume_tetrahedra_m3:.9g} m^3",
            f"reliable: {'yes' if self.reliable else 'no'}",
            f"boundary edges: {self.boundary_edges}",
            f"support gap: {gap} (tolerance {self.gap_tolerance_m:.6g} m)",
        ]
        if self.unsupported_fraction is not None:
            lines.append(f"unsupported surface: {100 * self.unsupported_fraction:.2f}%")
        return lines

    def to_text(self) -> str:
        return "\n".join(self.text_lines() + [f"warning: {m}" for m in self.warnings]) + "\n"


class PipelineReport(BaseModel):
    views: list[ViewSummary]
    cloud_points: int
    plane: list[float] | None = None
    reconstruction_points: int
    grid_dims: list[int]
    grid_spacing_m: float
    cg_iterations: int
    cg_residual: float
    isovalue: float
    mesh_vertices: int
    mesh_faces: int
    volume: VolumeSummary
    reference_volume_m3: float | None = None
    relative_error_percent: float | None = None
    timings_s: dict[str, float] = Field(default_factory=dict)

    def to_text(self) -> str:
        lines = self.volume.text_lines()
        if self.reference_volume_m3 is not None:
            lines.append(f"reference volume: {self.reference_volume_m3:.9g} m^3, relative error {self.relative_error_percent:+.3f}%")
        if self.plane is not None:
            lines.append("plane: " + " ".join(f"{x:.6g}" for x in self.plane))
        lines.append(f"points: {self.cloud_points} merged, {self.reconstruction_points} reconstructed")
        lines.append(f"grid: {'x'.join(str(d) for d in self.grid_dims)} cells at {self.grid_spacing_m:.6g} m, CG {self.cg_iterations} iterations (residual {self.cg_residual:.2e})")
        lines.append(f"mesh: {self.mesh_vertices} vertices, {self.mesh_faces} faces, iso-value {self.isovalue:.6g}")
        for view in self.views:
            detail = {"reference": "reference frame", "pose": "given pose"}.get(view.placement, f"to view {view.reference}, {view.inliers} inliers")
            if view.icp_rms is not None:
                detail += f", ICP RMS {view.icp_rms:.3e} m"
            if view.overlap_rms is not None:
                detail += f", overlap RMS {view.overlap_rms:.3e} m"
            lines.append(f"view {view.index}: {view.points} points, {detail}")
        for stage, seconds in self.timings_s.items():
            lines.append(f"time {stage}: {seconds:.3f} s")
        lines.extend(f"warning: {m}" for m in self.volume.warnings)
        return "\n".join(lines) + "\n"
