#!/usr/bin/env python3
"""Run the desk-scale visibility/specular ablation and print the trend table.

Trains a teacher with and without visibility conditioning, distills three
student variants from the full teacher, and reports held-out MSEs.
"""

import argparse
from pathlib import Path

from primlight.config import configure_threads
from primlight.experiments import AblationBudget, run_desk_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/ablation"))
    ap.add_argument("--teacher-steps", type=int, default=320)
    ap.add_argument("--student-steps", type=int, default=280)
    ap.add_argument("--frames", type=int, default=17)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args()
    configure_threads(args.threads)

    budget = AblationBudget(n_frames=args.frames, teacher_steps=args.teacher_steps,
                            student_steps=args.student_steps, seed=args.seed)
    result = run_desk_ablation(args.out, budget)

    print("\n=== ablation (held-out MSE, lower is better) ===")
    print(f"teacher with visibility    {result.teacher_mse['with_vis']:.6f}")
    print(f"teacher w/o visibility     {result.teacher_mse['no_vis']:.6f}")
    print(f"student full               {result.student_mse['full']:.6f}")
    print(f"student w/o specular       {result.student_mse['no_specular']:.6f}")
    print(f"student w/o visibility     {result.student_mse['no_visibility']:.6f}")
    print(f"distill train / held-out envmap MSE: "
          f"{result.distill_mse['train']:.6f} / {result.distill_mse['heldout_env']:.6f}")
    print(f"wall clock: {result.wall_clock_s / 60:.1f} min")


if __name__ == "__main__":
    main()
