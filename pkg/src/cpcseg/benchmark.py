"""Desk-scale cross-domain task: warm-fit a toy encoder on synthetic domain A,
then adapt it to the shifted domain B."""

from __future__ import annotations

from dataclasses import dataclass, field

from .data import DatasetManifest, SynthConfig, generate_synthetic, make_episodes
from .encoder import EncoderConfig, init_toy_encoder
from .evaluation import evaluate
from .finetune import FineTuneConfig, finetune_sup, run_strategy
from .supportsel import embedding_table, select_support

WARMUP = FineTuneConfig(strategy="sup_ft", lr=0.05, iterations=300, clusters=5)
ADAPT = FineTuneConfig(strategy="cpc", lr=0.003, iterations=500, clusters=5)


@dataclass
class TaskSpec:
    seed: int = 0
    n_queries: int = 20
    k: int = 1
    n_warm: int = 16          # domain-A images used for the warm fit
    n_held: int = 12          # held-out domain-A images (sweep pool, in-domain reference)
    synth: SynthConfig | None = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    warmup: FineTuneConfig = WARMUP


@dataclass
class Task:
    spec: TaskSpec
    domain_a: DatasetManifest
    domain_b: DatasetManifest
    base_encoder: object
    support: list
    queries: list
    warm_log: object = None

    def evaluate(self, encoder, config: FineTuneConfig):
        return evaluate(encoder, self.support, self.queries, config)

    def run(self, config: FineTuneConfig):
        """Adapt the warm-fit encoder with ``config``; returns ``(report, runlog, encoder)``."""
        tuned, runlog = run_strategy(self.base_encoder, self.support, self.queries, config)
        return self.evaluate(tuned, config), runlog, tuned

    def held_out_pool(self) -> DatasetManifest:
        return self.domain_a.subset(self.domain_a.ids[self.spec.n_warm:])

    def held_out_a(self, config: FineTuneConfig):
        """Score the base encoder on held-out domain-A queries with an A support."""
        pool = self.held_out_pool()
        table = embedding_table(self.base_encoder, pool.samples)
        support, queries = make_episodes(pool, select_support(table, self.spec.k, config.seed))
        return evaluate(self.base_encoder, support, queries, config)


def build_task(spec: TaskSpec) -> Task:
    synth = spec.synth or SynthConfig(seed=spec.seed, n_a=spec.n_warm + spec.n_held,
                                      n_b=spec.n_queries + spec.k)
    domain_a, domain_b = generate_synthetic(synth)
    encoder = init_toy_encoder(spec.encoder, seed=spec.seed)
    warm = domain_a.subset(domain_a.ids[:spec.n_warm])
    base, warm_log = finetune_sup(encoder, warm.samples, spec.warmup.replace(seed=spec.seed))
    table = embedding_table(base, domain_b.samples)
    support_ids = select_support(table, spec.k, spec.seed)
    support, queries = make_episodes(domain_b, support_ids)
    return Task(spec, domain_a, domain_b, base, support, queries[:spec.n_queries], warm_log)
