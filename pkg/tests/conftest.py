"""Shared reference configuration for the acceptance suite.

Desk-scale analogue of the class-disjoint benchmark: 10 Gaussian-blob
classes in 20 input dimensions, dealt 2 classes per client to 10 clients,
trained for 30 rounds of 10 local epochs. e_h=400 gives realistic feature
norms (|h| = 20) so the learnable-classifier collapse dynamics surface;
e_w compensates so the fixed-frame arms see an order-one logit scale.
"""

REFERENCE = {
    "classes": 10,
    "input_dim": 20,
    "n_per_class": 100,
    "class_sep": 2.0,
    "noise_sigma": 1.0,
    "scheme": "pcdd",
    "classes_per_client": 2,
    "clients": 10,
    "rounds": 30,
    "epochs": 10,
    "batch_size": 20,
    "min_size": 10,
    "lr": 0.02,
    "e_w": 1e-4,
    "e_h": 400.0,
    "hidden": "64",
    "feature_dim": 32,
    "eval_every": 1,
    "finetune_epochs": 10,
}
