import numpy as np
import pytest

from protomix import Cohort, EmbeddingSet, Target


def random_cohort(
    rng: np.random.Generator,
    num_sets: int = 5,
    d: int = 4,
    n_range: tuple[int, int] = (2, 12),
    with_coords: bool = True,
    target_kind: str | None = "class_label",
    num_classes: int = 3,
) -> Cohort:
    sets = []
    for i in range(num_sets):
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        feats = rng.standard_normal((n, d)).astype(np.float32)
        coords = None
        if with_coords:
            flat = rng.choice(4 * n, size=n, replace=False)
            coords = np.stack([flat % (2 * n), flat // (2 * n)], axis=1).astype(np.int32)
        target = None
        if target_kind == "class_label":
            target = Target(kind="class_label", class_label=int(rng.integers(num_classes)))
        elif target_kind == "survival":
            target = Target(
                kind="survival",
                time=float(rng.uniform(0.1, 20.0)),
                event=bool(rng.integers(2)),
            )
        sets.append(EmbeddingSet(id=f"s{i:03d}", features=feats, coords=coords, target=target))
    observed = None
    if target_kind == "class_label":
        observed = max(s.target.class_label for s in sets) + 1
    return Cohort(sets=sets, d=d, num_classes=observed)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
