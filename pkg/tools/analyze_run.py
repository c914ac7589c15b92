#!/usr/bin/env python3
"""
Run Analysis Tool
=================

Checks a training run directory and reports:
- loss health (non-finite values, divergence)
- pseudo-label quality collapse
- temperatures pinned at the clamp bounds
- evaluation history and missing reports
"""

import json
import math
import sys
from datetime import datetime
from pathlib import Path

import pandas as pd

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from models import MAX_TEMPERATURE, MIN_TEMPERATURE  # noqa: E402

LOSS_COLUMNS = ("L_s", "L_u_hard", "L_u_soft", "L_mix", "L_cal")
PIN_MARGIN = 0.01


def analyze_run_directory(run_dir):
    """Analyze one run directory; None if it does not exist"""
    run_path = Path(run_dir)
    if not run_path.exists():
        print(f"❌ Run directory does not exist: {run_dir}")
        return None

    print(f"🔍 Analyzing Run Directory: {run_dir}")
    print("=" * 60)

    analysis = {
        "directory": str(run_path),
        "timestamp": datetime.now().isoformat(),
        "summary": {},
        "issues": [],
        "recommendations": [],
    }

    manifest_file = run_path / "manifest.json"
    if manifest_file.exists():
        with open(manifest_file, "r", encoding="utf-8") as f:
            manifest = json.load(f)
        analysis["manifest"] = {k: manifest.get(k) for k in ("variant", "seed", "status", "iteration", "config_hash")}
    else:
        analysis["issues"].append("No manifest.json; the run cannot be traced to a config")

    train_log = run_path / "train_log.csv"
    if train_log.exists():
        analysis["training"] = analyze_train_log(pd.read_csv(train_log), analysis["issues"])
    else:
        analysis["issues"].append("No train_log.csv")

    eval_log = run_path / "eval_log.csv"
    if eval_log.exists():
        analysis["evaluation"] = analyze_eval_log(pd.read_csv(eval_log))

    reports = sorted(p.name for p in run_path.glob("report_*.csv"))
    analysis["reports"] = reports
    if not reports:
        analysis["issues"].append("No calibration reports; run `dacal_cli.py eval` on the checkpoint")

    analysis["summary"] = {
        "iterations_logged": analysis.get("training", {}).get("iterations", 0),
        "evaluations": analysis.get("evaluation", {}).get("count", 0),
        "reports": len(reports),
        "issues_found": len(analysis["issues"]),
    }
    generate_recommendations(analysis)
    return analysis


def analyze_train_log(frame: pd.DataFrame, issues: list) -> dict:
    """Loss, quality and temperature statistics of train_log.csv"""
    result = {"iterations": int(frame["iteration"].max()) if len(frame) else 0}

    for column in LOSS_COLUMNS:
        if column not in frame:
            continue
        values = frame[column].astype(float)
        bad = frame.loc[~values.map(math.isfinite), "iteration"]
        if len(bad):
            issues.append(f"Non-finite {column} first at iteration {int(bad.iloc[0])}")
        finite = values[values.map(math.isfinite)]
        if len(finite):
            result[column] = {"first": float(finite.iloc[0]), "last": float(finite.iloc[-1]),
                              "max": float(finite.max())}

    if "q_mean" in frame and len(frame):
        tail = frame["q_mean"].tail(max(1, len(frame) // 10))
        result["q_mean_last"] = float(tail.mean())
        if result["q_mean_last"] < 0.05 and frame["L_u_hard"].abs().sum() > 0:
            issues.append(f"Pseudo-label quality collapsed (q ~ {result['q_mean_last']:.3f} at the end)")

    if "mean_T" in frame and len(frame):
        temps = frame["mean_T"].astype(float)
        result["mean_T_last"] = float(temps.iloc[-1])
        pinned_low = (temps <= MIN_TEMPERATURE + PIN_MARGIN).mean()
        pinned_high = (temps >= MAX_TEMPERATURE - PIN_MARGIN).mean()
        result["temperature_pinned_fraction"] = float(pinned_low + pinned_high)
        if pinned_low > 0.1 or pinned_high > 0.1:
            issues.append(f"Mean temperature sits at a clamp bound in {100 * (pinned_low + pinned_high):.0f}% of steps")
    return result


def analyze_eval_log(frame: pd.DataFrame) -> dict:
    if not len(frame):
        return {"count": 0}
    best = frame.loc[frame["miou"].idxmax()]
    return {
        "count": int(len(frame)),
        "best_miou": float(best["miou"]),
        "best_iteration": int(best["iteration"]),
        "last_miou": float(frame["miou"].iloc[-1]),
        "last_ece": float(frame["ece"].iloc[-1]),
    }


def generate_recommendations(analysis):
    """Recommendations derived from the findings"""
    recommendations = []
    training = analysis.get("training", {})
    evaluation = analysis.get("evaluation", {})
    manifest = analysis.get("manifest", {})

    if any(issue.startswith("Non-finite") for issue in analysis["issues"]):
        recommendations.append("Lower training.lr or dacal.alpha/beta; the run diverged")
    if training.get("temperature_pinned_fraction", 0) > 0.1:
        recommendations.append("Temperatures hit the clamp; try a smaller dacal.beta or a larger warm-up")
    if training.get("q_mean_last", 1.0) < 0.05:
        recommendations.append("Pseudo-labels rarely pass tau; lower training.tau or train longer on source first")
    if evaluation and evaluation["last_miou"] < evaluation["best_miou"] - 0.02:
        recommendations.append("Target mIoU fell after its peak; evaluate checkpoint_best.pt instead of the last one")
    if manifest and manifest.get("status") not in (None, "completed"):
        recommendations.append(f"Run status is {manifest.get('status')!r}; resume with `dacal_cli.py train`")

    analysis["recommendations"] = recommendations


def print_analysis_report(analysis):
    print("\n📊 ANALYSIS REPORT")
    print("=" * 60)

    manifest = analysis.get("manifest")
    if manifest:
        print(f"🧪 Variant: {manifest.get('variant')}  Seed: {manifest.get('seed')}  Status: {manifest.get('status')}")
        print(f"🔑 Config hash: {manifest.get('config_hash')}")

    training = analysis.get("training", {})
    print(f"🔄 Iterations logged: {training.get('iterations', 0)}")
    for column in LOSS_COLUMNS:
        if column in training:
            stats = training[column]
            print(f"   {column}: {stats['first']:.4f} -> {stats['last']:.4f} (max {stats['max']:.4f})")
    if "mean_T_last" in training:
        print(f"🌡️  Final mean temperature: {training['mean_T_last']:.3f}")

    evaluation = analysis.get("evaluation")
    if evaluation and evaluation["count"]:
        print(f"\n🎯 EVALUATION")
        print(f"✅ Best mIoU: {evaluation['best_miou']:.4f} at iteration {evaluation['best_iteration']}")
        print(f"📈 Last mIoU: {evaluation['last_miou']:.4f}, last ECE: {evaluation['last_ece']:.4f}")

    if analysis["reports"]:
        print(f"\n📋 REPORTS")
        for name in analysis["reports"]:
            print(f"   • {name}")

    if analysis["issues"]:
        print(f"\n⚠️  ISSUES FOUND ({len(analysis['issues'])})")
        for issue in analysis["issues"]:
            print(f"   • {issue}")

    if analysis["recommendations"]:
        print(f"\n💡 RECOMMENDATIONS")
        for rec in analysis["recommendations"]:
            print(f"   • {rec}")

    print(f"\n✅ Analysis complete!")


def main():
    if len(sys.argv) < 2:
        print("Usage: python tools/analyze_run.py <run_directory>")
        print("Example: python tools/analyze_run.py runs/PH_seed0")
        return

    run_dir = sys.argv[1]
    analysis = analyze_run_directory(run_dir)
    if analysis:
        print_analysis_report(analysis)
        analysis_file = Path(run_dir) / "analysis_report.json"
        with open(analysis_file, "w", encoding="utf-8") as f:
            json.dump(analysis, f, indent=2)
        print(f"\n💾 Analysis saved to: {analysis_file}")


if __name__ == "__main__":
    main()
