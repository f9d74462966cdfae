"""What a zap does and does not touch.

Zapping resamples the classifier row of one class from the initial weight
distribution and zeroes its bias entry. Features and all other rows are left
bit-identical, so only the zapped class's logit moves.
"""

import numpy as np

from zaplab.models import arch_preset, build_convnet, clone_params
from zaplab.zapping import ZapPolicy, zap_class, zap_iid

spec = arch_preset("synth", num_classes=10)
model = build_convnet(spec, np.random.default_rng(0), dtype=np.float32)
rng = np.random.default_rng(42)

x = np.random.default_rng(1).random((1, 1, 28, 28)).astype(np.float32)
before_params = clone_params(model)
before_logits = model.forward(x).data.copy()

zap_class(model, class_index=3, rng=rng)

after_logits = model.forward(x).data
changed = [c for c in range(10) if before_logits[0, c] != after_logits[0, c]]
print("logits that moved after zapping class 3:", changed)
print("bias[3] after zap:", model.params["fc.bias"].data[3])

untouched = [
    name for name in model.param_names()
    if name != "fc.weight" and np.array_equal(model.params[name].data, before_params[name])
]
print("parameters bit-identical apart from the zapped row:", untouched)

# resampled rows follow the init distribution: std sqrt(2/fan_in)
rows = []
for _ in range(2000):
    zap_class(model, 3, rng)
    rows.append(model.params["fc.weight"].data[3].copy())
rows = np.concatenate(rows)
print(f"resampled std {rows.std():.4f} vs sqrt(2/{spec.feature_dim}) = "
      f"{np.sqrt(2 / spec.feature_dim):.4f}")

# cadence form used by i.i.d. pre-training: k classes every E epochs
policy = ZapPolicy(mode="iid_cadence", k_classes=4, cadence_epochs=2)
for epoch in range(4):
    zapped = zap_iid(model, policy, epoch, rng)
    print(f"epoch {epoch}: zapped {sorted(zapped) if zapped else 'nothing'}")
