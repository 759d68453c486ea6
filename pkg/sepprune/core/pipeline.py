import logging
import time
from abc import ABC
from typing import Any, List, Optional, Tuple

from numpy import random

from sepprune.core.registry import Registry

log = logging.getLogger("root")


class PipelineComponent(ABC):
    def run(self, *args, **kwargs):
        """
        The real signature is (self, registry: Registry, random: numpy.random.Generator, *args), where *args are
        the outputs of the previous component. Each component returns a tuple that becomes the next one's *args.
        """
        raise NotImplementedError

    def __str__(self) -> str:
        return str(self.__class__.__name__)


class Pipeline(object):
    """
    Runs components in order on one shared random stream. A failing component stops the run; the components that
    finished before it are listed in `completed`.
    """

    def __init__(self, registry: Registry, *components: PipelineComponent) -> None:
        self._registry = registry
        self._components = components
        self.completed = []  # type: List[str]

    @property
    def registry(self) -> Registry:
        return self._registry

    @property
    def components(self) -> Tuple[PipelineComponent, ...]:
        return self._components

    def run(self, initial_inputs: Tuple[Any, ...] = (), prng_seed: Optional[int] = None) -> Tuple[Any, ...]:
        log.info("Starting pipeline of {} components".format(len(self.components)))
        log.debug("PRNG seed is {}".format(prng_seed))
        prng = random.default_rng(prng_seed)  # type: random.Generator
        log.info("First random is {}".format(prng.integers(0, 1000000)))
        self.completed = []
        outputs = tuple(initial_inputs)
        for component in self.components:
            log.info("Running component {}".format(component))
            started = time.perf_counter()
            try:
                outputs = component.run(self.registry, prng, *outputs)
            except Exception as ex:
                log.exception("Component {} failed after {}: {}".format(component, self.completed or "nothing", ex))
                raise
            self.completed.append(str(component))
            log.info("{} finished in {:.1f} s".format(component, time.perf_counter() - started))
        log.info("Pipeline completed")
        return outputs
