"""Query a model service with and without counterfactuals and attack both views.

Run: python demos/counterfactual_leak.py
"""

import numpy as np

from cfmia import attack, data, nn
from cfmia.facade import MlaasService, ServiceConfig
from cfmia.pipeline import eval_sets

clean, _ = data.preprocess(data.make_surrogate(n=2000, seed=0))
splits = data.split_45_45_10(clean, 0)
cfg = nn.eeg_preset(epochs=40, seed=0)
model, _ = nn.train(cfg, splits.target_train, splits.validation)
service = MlaasService(model, splits.target_train, ServiceConfig(cf_enabled=True))

x = splits.validation.rows[0]
resp = service.query(x)
print("posterior", np.round(resp.posterior, 3))
if resp.counterfactual is not None:
    cf = resp.counterfactual
    print(f"counterfactual flips to class {cf.cf_class}, HEOM {cf.proximity:.3f}, "
          f"{cf.sparsity} features changed")

members = {int(i) for i in splits.target_train.row_ids}
shadow = attack.ShadowConfig(shadow_arch=cfg, num_shadows=3)
suite = attack.run_attack_suite(service, splits.shadow_pool, eval_sets(splits, members, 2, 0), shadow, runs=2)
for setting, rep in suite.reports.items():
    print(f"{setting:>6}: attack accuracy {rep.accuracy:.3f}")
