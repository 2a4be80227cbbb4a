#!/usr/bin/env python3
"""End-to-end desk-scale pipeline: synthetic capture -> teacher -> student ->
sample renders. Leaves a directory ready for `primlight serve` + the viewer.

    python3 scripts/run_desk_pipeline.py --out runs/desk
    primlight serve --capture runs/desk/capture \
        --teacher runs/desk/teacher/teacher.plt \
        --student runs/desk/student/student.plt \
        --envmap-dir runs/desk/student/envmaps --static-dir frontend
"""

import argparse
import subprocess
import sys
from pathlib import Path


def run(args):
    print("+", " ".join(map(str, args)))
    subprocess.run([sys.executable, "-m", "primlight.cli", *map(str, args)], check=True)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--teacher-steps", type=int, default=300)
    ap.add_argument("--student-steps", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = args.out
    run(["simulate-capture", "--out", out / "capture", "--frames", 17,
         "--key-stride", 4, "--cameras", 2, "--image-size", 48, "--seed", args.seed])
    run(["train-teacher", "--capture", out / "capture", "--out", out / "teacher",
         "--steps", args.teacher_steps, "--seed", args.seed])
    run(["distill-student", "--capture", out / "capture",
         "--teacher", out / "teacher" / "teacher.plt", "--out", out / "student",
         "--steps", args.student_steps, "--frames", 6, "--seed", args.seed])
    run(["render", "--capture", out / "capture",
         "--teacher", out / "teacher" / "teacher.plt", "--mode", "olat",
         "--light-index", "3", "--frame", "1", "--out", out / "renders"])
    run(["render", "--capture", out / "capture",
         "--student", out / "student" / "student.plt", "--mode", "envmap",
         "--envmap", out / "student" / "envmaps" / "env000.pfm",
         "--frame", "1", "--out", out / "renders"])
    run(["bench", "--capture", out / "capture",
         "--student", out / "student" / "student.plt", "--out", out / "bench",
         "--runs", 50])
    print(f"\npipeline artifacts under {out}")


if __name__ == "__main__":
    main()
