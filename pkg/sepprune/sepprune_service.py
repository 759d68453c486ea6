import logging
import random
from typing import Any, Dict, Iterable, List, Optional, Tuple

from sepprune.config import RunConfig
from sepprune.core.datastore import ArtifactStore
from sepprune.core.pipeline import Pipeline
from sepprune.core.registry import Registry
from sepprune.stages import PIPELINE, Stage, stage_named

log = logging.getLogger("root")


class SepPruneService(object):
    def __init__(
        self,
        config: RunConfig,
        output: Optional[str] = None,
        force: bool = False,
        random_seed: Optional[int] = None,
        options: Optional[Dict[str, Any]] = None,
    ) -> None:
        """
        :param output: output directory, overriding the config and the environment
        :param force: allow overwriting existing artifacts
        :param random_seed: seed for the pipeline's random stream, defaults to the config's run seed
        :param options: per-invocation stage options (checkpoint, length)
        """
        self.config = config
        self.registry = Registry()
        self.registry.register("config", config)
        self.store = ArtifactStore(config.output_root(output), force)
        self.registry.register("store", self.store)
        self.registry.register("options", dict(options or {}))
        self._set_seed(random_seed if random_seed is not None else config.run.seed)
        log.info("Output directory {}, config hash {}".format(self.store.root, config.config_hash()))

    def _set_seed(self, seed_val: Optional[int] = None) -> None:
        log.info("Selecting seed for the pipeline")
        if seed_val is None:
            seed_val = random.randint(1, 10000000)
            log.info("No preset seed, using random seed {}".format(seed_val))
        else:
            log.info("Using preset seed {}".format(seed_val))
        self.registry.register("seed", seed_val)

    def _get_components(self, stages: Iterable[str]) -> List[Stage]:
        return [stage_named(name) for name in stages]

    def run_stages(self, stages: Iterable[str]) -> Tuple[str, ...]:
        components = self._get_components(stages)
        # Fail before any work when a later stage would overwrite an existing artifact.
        for component in components:
            self.store.check_writable(component.all_outputs())
        pipeline = Pipeline(self.registry, *components)
        return pipeline.run((), prng_seed=self.registry.get("seed"))

    def run_stage(self, stage: str) -> Tuple[str, ...]:
        return self.run_stages([stage])

    def run_pipeline(self) -> Tuple[str, ...]:
        return self.run_stages(PIPELINE)
