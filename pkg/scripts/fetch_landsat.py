"""Build ``data/landsat.csv`` (Statlog satellite image data) from the keel-ds wheel.

The wheel on PyPI bundles the 6435-row satimage table. Rows keep the file
order; the first 4435 are marked ``train`` and the last 2000 ``test``, the
same sizes as the usual Statlog split.

Usage::

    python scripts/fetch_landsat.py [--out data/landsat.csv] [--wheel path.whl]
"""
import argparse
import csv
import glob
import io
import json
import os
import subprocess
import sys
import tempfile
import zipfile

MEMBER = "keel_ds/data/balanced/raw/satimage.dat"
N_TRAIN = 4435


def find_wheel(tmp):
    subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "--quiet",
                    "-d", tmp, "keel-ds==0.2.5"], check=True)
    return glob.glob(os.path.join(tmp, "keel_ds-*.whl"))[0]


def read_rows(wheel):
    with zipfile.ZipFile(wheel) as zf:
        text = zf.read(MEMBER).decode()
    rows = []
    for line in io.StringIO(text):
        line = line.strip()
        if not line or line.startswith("@"):
            continue
        rows.append([v.strip() for v in line.split(",")])
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data", "landsat.csv"))
    ap.add_argument("--wheel", help="use an already downloaded keel-ds wheel")
    args = ap.parse_args(argv)
    with tempfile.TemporaryDirectory() as tmp:
        rows = read_rows(args.wheel or find_wheel(tmp))
    if len(rows) != 6435 or any(len(r) != 37 for r in rows):
        raise SystemExit(f"unexpected table shape: {len(rows)} rows")
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"a{i}" for i in range(36)] + ["label", "split"])
        for i, r in enumerate(rows):
            w.writerow(r + ["train" if i < N_TRAIN else "test"])
    schema = {"label": "label", "split_column": "split", "train_value": "train", "normalization": "unity"}
    with open(os.path.splitext(args.out)[0] + ".schema.json", "w") as fh:
        json.dump(schema, fh, indent=2)
    print(f"wrote {args.out} ({len(rows)} rows)")


if __name__ == "__main__":
    main()
