"""End-to-end finite-difference check on a tiny two-way one-shot episode."""

from __future__ import annotations

from .autodiff import GradCheckReport, grad_check
from .episodes import EpisodeTask, SceneConfig, generate_scene
from .model import MICRO, ModelConfig, init_params
from .trainer import LossWeights, task_loss


def micro_episode(seed: int = 0, size: int = 32) -> EpisodeTask:
    """Two classes, one support image holding both, a query with one object.

    With the stop step the query decodes in exactly two steps.
    """
    scene = SceneConfig(size=size, r_min=3, r_max=4, max_objects=3)
    classes = [1, 2]
    sup_img, sup_lab = generate_scene(seed, classes, [1, 1], scene)
    q_img, q_lab = generate_scene(seed + 1, classes, [1, 0], scene)
    return EpisodeTask(tuple(classes), (0, 1), [sup_img], [sup_lab], q_img, q_lab)


def micro_gradcheck(cfg: ModelConfig = MICRO, seed: int = 0, step: float = 1e-5, tol: float = 1e-3,
                    max_entries=None) -> GradCheckReport:
    """Backbone, prototypes, decoder and loss checked against central differences."""
    params = init_params(cfg, seed)
    task = micro_episode(seed, cfg.image_size)
    weights = LossWeights(1.0, 1.0)
    return grad_check(lambda: task_loss(params, cfg, task, weights)[0], params,
                      step=step, tol=tol, max_entries=max_entries, seed=seed)


def gradcheck_line(report: GradCheckReport) -> str:
    status = "PASS" if report.passed else "FAIL"
    return f"{status} max_rel_err={report.max_rel_err:.3e} tol={report.tol:g} entries={report.entries_checked}"


def worst_params(report: GradCheckReport, n: int = 3) -> list:
    return sorted(report.per_param.items(), key=lambda kv: -kv[1])[:n]

