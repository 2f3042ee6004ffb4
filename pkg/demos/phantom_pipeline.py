"""Two-stage pipeline on a small phantom, end to end through the command line.

    python demos/phantom_pipeline.py [workdir]

synth -> train-loc -> extract-roi -> train-seg -> evaluate -> predict -> report.
Settings are shrunk so the whole thing runs in a few minutes on a CPU; drop the
overrides for the full-size defaults.
"""
import sys
from pathlib import Path

from carotid_ssl.cli import main

work = Path(sys.argv[1] if len(sys.argv) > 1 else "phantom_demo")
small = [
    "--override", "trainer.max_epochs=8",
    "--override", "trainer.lr=1e-3",
    "--override", "model.base_channels=8",
]


def run(*argv):
    print("$ carotid-ssl", " ".join(argv))
    rc = main(list(argv))
    if rc:
        sys.exit(rc)


data = work / "data" / "manifest.json"
run("synth", "--out", str(work / "data"), "--patients", "10", "--slices", "3", "--size", "128", "--labeled-fraction", "0.6", "--seed", "0")
run("train-loc", "--manifest", str(data), "--out", str(work / "loc"), *small)
run("extract-roi", "--manifest", str(data), "--checkpoint", str(work / "loc" / "best.pt"), "--out", str(work / "rois"))
rois = work / "rois" / "manifest.json"
run("train-seg", "--manifest", str(rois), "--out", str(work / "seg"), *small, "--override", "trainer.ssl_mode=owc")
run("evaluate", "--manifest", str(rois), "--checkpoint", str(work / "seg" / "best.pt"), "--out", str(work / "seg"))
run(
    "predict", "--manifest", str(data), "--loc-checkpoint", str(work / "loc" / "best.pt"),
    "--seg-checkpoint", str(work / "seg" / "best.pt"), "--out", str(work / "pred"),
)
run("report", "--run", str(work / "seg"))
print(f"outputs under {work.resolve()}")
