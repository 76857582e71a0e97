import os

from dotenv import load_dotenv

load_dotenv(".env")


def _int_env(name, default):
    v = os.getenv(name)
    try:
        return int(v) if v is not None else default
    except Exception:
        return default


def _float_env(name, default):
    v = os.getenv(name)
    try:
        return float(v) if v is not None else default
    except Exception:
        return default


def _bool_env(name, default):
    v = os.getenv(name)
    if v is None:
        return default
    return v.lower() in ("1", "true", "yes")


CFG = {
    "seed": _int_env("RGBDVOL_SEED", 0),
    "threads": _int_env("RGBDVOL_THREADS", max(1, min(8, (os.cpu_count() or 1) // 2))),
    "grid_res": _int_env("RGBDVOL_GRID_RES", 128),
    "screening_alpha": _float_env("RGBDVOL_SCREENING_ALPHA", 4.0),
    "cg_tol": _float_env("RGBDVOL_CG_TOL", 1e-6),
    "cg_max_iters": _int_env("RGBDVOL_CG_MAX_ITERS", 4000),
    "ransac_iters": _int_env("RGBDVOL_RANSAC_ITERS", 1000),
    "inlier_thresh": _float_env("RGBDVOL_INLIER_THRESH", 0.005),
    "icp_iters": _int_env("RGBDVOL_ICP_ITERS", 50),
    "icp_eps": _float_env("RGBDVOL_ICP_EPS", 1e-7),
    "jump_threshold": _float_env("RGBDVOL_JUMP_THRESHOLD", 0.05),
    "depth_format": os.getenv("RGBDVOL_DEPTH_FORMAT", "pfm"),
    "debug": _bool_env("RGBDVOL_DEBUG", False),
}
