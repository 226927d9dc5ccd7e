"""How much noise each privacy budget costs, and what it does to a small model.

Run: python demos/privacy_accounting.py
"""

from cfmia import data, dp, nn

DELTA = 1e-5

clean, _ = data.preprocess(data.make_surrogate(n=2000, seed=0))
splits = data.split_45_45_10(clean, 0)
cfg = nn.eeg_preset(epochs=30, seed=0)
n = len(splits.target_train)

for eps in (1.0, 3.0, 5.0, 10.0):
    budget = dp.prepare_budget(dp.DpBudget(eps, DELTA), n, cfg)
    print(f"eps {eps:>4g}: q {budget.sample_rate:.4f}, {budget.steps} steps, sigma {budget.noise_multiplier:.3f}")
    model, realized, _ = dp.train_dp(cfg, dp.DpBudget(eps, DELTA), splits.target_train, splits.validation)
    print(f"          realized eps {realized:.3f}, validation accuracy {nn.accuracy(model, splits.validation):.3f}")

model, _ = nn.train(cfg, splits.target_train, splits.validation)
print(f"non-private reference: validation accuracy {nn.accuracy(model, splits.validation):.3f}")
