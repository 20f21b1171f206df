from __future__ import annotations

from . import (
    analyze,
    bench,
    build_dataset,
    compare_pooling,
    distill,
    finetune,
    history,
    plot,
    tokenizer,
    train_teacher,
    validate,
)

# subcommand order in --help
STAGES = (
    build_dataset,
    validate,
    tokenizer,
    train_teacher,
    finetune,
    distill,
    compare_pooling,
    bench,
    analyze,
    plot,
    history,
)


def register_all(sub) -> None:
    for stage in STAGES:
        stage.register(sub)
