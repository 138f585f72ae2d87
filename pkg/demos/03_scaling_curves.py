# %%
# The quadratic/linear separation, measured
# =========================================
#
# The two architectures promise different pre-fill costs:
#
#     baseline   time ~ d (M+N)^2      memory ~ (M+N)^2
#     hybrid     time ~ dMN + d^2 M    memory ~ MN
#
# Instead of trusting the algebra, this script counts the floating-point
# work of real forward passes over a geometric grid of video lengths and
# fits log-log slopes.  Expect roughly 2 for the baseline, roughly 1 for
# the hybrid.  (The full acceptance grid runs to M = 16384; this demo stops
# earlier to stay quick.)

from hybridseq import profiler as pf
from hybridseq.model import ARCH_BASELINE, ARCH_HYBRID, HybridStackConfig, build_model

GRID = [256, 512, 1024, 2048, 4096]
N = 64

# %%
# Counted FLOPs: the numerics layer reports every matmul and elementwise op
# executed during prefill; nothing is estimated.

points = {}
for arch in (ARCH_HYBRID, ARCH_BASELINE):
    cfg = HybridStackConfig(d=64, n_layers=2, n_heads=4, vocab_size=256,
                            architecture=arch, block_variant="mamba2").validate()
    model = build_model(cfg, seed=0)
    pts = []
    for m in GRID:
        seq = pf._sequence_for(model, m, N)
        flops = pf.counted_cost(model, seq)
        pts.append((m, flops))
        print(f"{arch:22s} M={m:5d}: {flops:.3e} counted FLOPs")
    points[arch] = pts

# %%
# Fit the scaling exponents.

for arch, pts in points.items():
    fit = pf.fit_scaling_exponent(pts)
    print(f"{arch:22s} slope {fit.slope:.3f}   r^2 {fit.r2:.5f}")

# %%
# The analytic cost model walks the same layer composition in closed form;
# counted and analytic agree tightly, which keeps the model honest.

for arch, pts in points.items():
    m, counted = pts[-1]
    analytic = pf.analytic_cost(arch, m, N, 64, 2)[0]
    print(f"{arch:22s} counted/analytic at M={m}: {counted / analytic:.4f}")

# %%
# Memory tells the same story: the baseline's retained score matrices grow
# with (M+N)^2, the hybrid's with M*N plus linear scan state.

for m in (1024, 2048, 4096, 8192):
    hyb = pf.memory_estimate(ARCH_HYBRID, m, N, d=64, layers=2, n_heads=4)
    base = pf.memory_estimate(ARCH_BASELINE, m, N, d=64, layers=2, n_heads=4)
    print(f"M={m:5d}: hybrid/baseline activation footprint = {hyb / base:.3f}")

# %%
# Wall-clock medians through the bench harness (3 repeats, small grid).

models = {
    ARCH_HYBRID: build_model(HybridStackConfig(architecture=ARCH_HYBRID).validate(), seed=0),
    ARCH_BASELINE: build_model(HybridStackConfig(architecture=ARCH_BASELINE).validate(), seed=0),
}
reports = pf.bench(models, [(m, N) for m in (256, 512, 1024)], repeats=3)
for r in reports:
    print(f"{r.arch:22s} M={r.m:5d}: {r.wall_ms_median:8.1f} ms median")
