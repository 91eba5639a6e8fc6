"""What the layouts buy at training scale, per the analytic cost model.

Simulation checks correctness at toy dims; the cost model extrapolates
step time to production dims from closed-form FLOP counts, per-op launch
overhead and the collective schedule. Two workloads matter: initial
training (many short crops) and fine-tuning (long crops). The branch
split is near-even on short crops and lopsided on long ones, which is
why the best layout changes between phases.
"""

from branchpar.costmodel import (FINE_TUNING_DEVICE, FINE_TUNING_MODEL,
                                 INITIAL_TRAINING_DEVICE,
                                 INITIAL_TRAINING_MODEL, branch_flops,
                                 end_to_end_days, evoformer_fraction,
                                 report_csv, schedule_bytes, speedup_report,
                                 step_time)
from branchpar.schedules import ParallelLayout

SWEEP = (ParallelLayout(), ParallelLayout(bp=2), ParallelLayout(dap=2),
         ParallelLayout(bp=2, dap=2), ParallelLayout(dap=4),
         ParallelLayout(bp=2, dap=4))

for name, model, device in (("initial training", INITIAL_TRAINING_MODEL,
                             INITIAL_TRAINING_DEVICE),
                            ("fine-tuning", FINE_TUNING_MODEL,
                             FINE_TUNING_DEVICE)):
    msa, pair = branch_flops(model)
    frac = evoformer_fraction(model, device)
    print(f"== {name}: s={model.s} r={model.r}, {model.n_blocks} blocks ==")
    print(f"block stack share of a step: {frac:.1%}")
    print(f"branch split: m track {msa / (msa + pair):.1%}, "
          f"z track {pair / (msa + pair):.1%}")
    print(report_csv(speedup_report(model, device, SWEEP)))

bytes_per_block = schedule_bytes(INITIAL_TRAINING_MODEL, ParallelLayout(bp=2),
                                 INITIAL_TRAINING_DEVICE)["fwd"] \
    // INITIAL_TRAINING_MODEL.n_blocks
print(f"branch schedule forward traffic: {bytes_per_block} bytes per block "
      f"(two pair-tensor broadcasts)")

best = ParallelLayout(bp=2, dap=4)
days = end_to_end_days(
    step_time(INITIAL_TRAINING_MODEL, best, INITIAL_TRAINING_DEVICE).total,
    step_time(FINE_TUNING_MODEL, best, FINE_TUNING_DEVICE).total)
base = end_to_end_days(
    step_time(INITIAL_TRAINING_MODEL, ParallelLayout(),
              INITIAL_TRAINING_DEVICE).total,
    step_time(FINE_TUNING_MODEL, ParallelLayout(),
              FINE_TUNING_DEVICE).total)
print(f"\nfull schedule (78125 initial + 11718 fine-tune steps):")
print(f"  single rank per replica: {base:.2f} days")
print(f"  bp2+dap4 per replica:    {days:.2f} days")
