import os
import re
import shutil
from datetime import datetime
from pathlib import Path

import pandas as pd

# =====================================================
# ENV / CONFIG
# =====================================================
STORE_CONFIG = {
    "out_dir": "bsr_out",
    "threads": 1,
    "keep_checkpoints": 2,
}

# Column order of every machine-readable table the CLI emits
SCHEMAS = {
    "memory": ["block", "role", "bytes", "mode"],
    "flops": ["block", "component", "macs"],
    "trace": ["step", "split", "loss", "accuracy", "lr", "tape_bytes"],
    "audit": ["block", "role", "predicted", "measured", "diff"],
    "compare": ["method", "accuracy", "loss", "memory_mb", "gmacs"],
    "plan_search": ["plan", "trainable", "drops", "rate", "memory_mb", "gmacs", "accuracy"],
}


def load_env_safely():
    """Load .env for local runs, skip if env vars already exist."""
    if not os.getenv("BSR_OUT_DIR"):
        try:
            from dotenv import load_dotenv
            env_path = Path(__file__).resolve().parent / ".env"
            if env_path.exists():
                load_dotenv(env_path)
        except ImportError:
            pass


def _env_int(name, default):
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        value = int(raw)
    except ValueError:
        print(f"⚠️ Ignoring non-integer {name}={raw!r}, using {default}")
        return default
    return max(1, value) if name == "BSR_THREADS" else max(0, value)


def get_threads():
    return _env_int("BSR_THREADS", STORE_CONFIG["threads"])


def get_keep_checkpoints():
    return _env_int("BSR_KEEP_CHECKPOINTS", STORE_CONFIG["keep_checkpoints"])


def get_out_dir():
    return Path(os.getenv("BSR_OUT_DIR") or STORE_CONFIG["out_dir"])


# =====================================================
# FILES
# =====================================================
def extract_date_from_name(name):
    """Extract the date from filenames ending in _YYMMDD.<ext>."""
    m = re.search(r"_(\d{6})\.[^.]+$", str(name))
    if m:
        try:
            return datetime.strptime(m.group(1), "%y%m%d")
        except ValueError:
            pass
    return None


def ensure_folder_exists(folder):
    folder = Path(folder)
    if not folder.exists():
        folder.mkdir(parents=True, exist_ok=True)
        print(f"📁 Created folder: {folder}")
    return folder


def backup_and_cleanup(folder, file_pattern="", keep=2):
    """
    Keeps the latest 'keep' dated files in the folder, moves older ones to {folder}_backup/.

    Structure created:
        bsr_out/checkpoints/
          ├── toy_source_261018.bsrckpt (latest)
          ├── toy_source_261017.bsrckpt
          └── checkpoints_backup/
              └── toy_source_261012.bsrckpt (old)
    """
    folder = Path(folder)
    if not folder.exists():
        return []
    backup_folder = folder / f"{folder.name}_backup"

    by_ext = {}
    for f in folder.iterdir():
        if not f.is_file() or (file_pattern and file_pattern not in f.name):
            continue
        date_obj = extract_date_from_name(f.name)
        if date_obj:
            by_ext.setdefault(f.suffix, []).append((f, date_obj))

    moved = []
    for ext, dated_files in by_ext.items():
        # Newest first; same-day files fall back to modification time
        dated_files.sort(key=lambda x: (x[1], x[0].stat().st_mtime), reverse=True)
        for old_file, _ in dated_files[keep:]:
            backup_folder.mkdir(exist_ok=True)
            target = backup_folder / old_file.name
            shutil.move(str(old_file), str(target))
            print(f"📦 Moved to backup: {old_file.name}")
            moved.append(target)
    return moved


def dated_name(prefix, ext, when=None):
    when = when or datetime.now()
    return f"{prefix}_{when.strftime('%y%m%d')}.{ext.lstrip('.')}"


def save_rotated_checkpoint(params, folder, prefix, keep=None, when=None):
    """Write <prefix>_<YYMMDD>.bsrckpt into folder and rotate older ones to the backup folder."""
    from vit_model import save_checkpoint

    folder = ensure_folder_exists(folder)
    path = folder / dated_name(prefix, "bsrckpt", when)
    save_checkpoint(params, path)
    print(f"💾 Saved checkpoint → {path}")
    keep = get_keep_checkpoints() if keep is None else keep
    backup_and_cleanup(folder, file_pattern=f"{prefix}_", keep=max(keep, 1))
    return path


def latest_checkpoint(folder, prefix):
    folder = Path(folder)
    if not folder.exists():
        return None
    dated = [f for f in folder.glob(f"{prefix}_*.bsrckpt") if extract_date_from_name(f.name)]
    if not dated:
        return None
    return max(dated, key=lambda f: (extract_date_from_name(f.name), f.stat().st_mtime))


# =====================================================
# TABLES
# =====================================================
def to_frame(rows, schema):
    columns = SCHEMAS[schema]
    df = pd.DataFrame(rows, columns=columns)
    return df[columns]


def write_table(df, path, schema=None):
    """Save a DataFrame as .csv or .parquet depending on the path suffix."""
    path = Path(path)
    if schema is not None and list(df.columns) != SCHEMAS[schema]:
        raise ValueError(f"columns {list(df.columns)} do not match schema '{schema}'")
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".parquet":
        df.to_parquet(path, index=False, engine="pyarrow")
    else:
        df.to_csv(path, index=False, encoding="utf-8")
    print(f"💾 Saved → {path}")
    return path


def read_table(path, schema=None):
    path = Path(path)
    if path.suffix == ".parquet":
        df = pd.read_parquet(path, engine="pyarrow")
    else:
        df = pd.read_csv(path, encoding="utf-8")
    if schema is not None and list(df.columns) != SCHEMAS[schema]:
        raise ValueError(f"{path} does not follow schema '{schema}'")
    return df
