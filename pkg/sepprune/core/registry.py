from typing import Any, Callable, Dict, List

_MISSING = object()


class ComponentNameCollisionError(Exception):
    pass


class UnknownComponentException(Exception):
    pass


class Registry(object):
    """Named objects shared by the stages of a pipeline run: config, artifact store, datasets, seed."""

    def __init__(self) -> None:
        self._components = {}  # type: Dict[str, Any]

    def register(self, name: str, component: Any) -> None:
        if name in self._components:
            raise ComponentNameCollisionError("'{}' is already registered".format(name))
        self._components[name] = component

    def get(self, name: str, default: Any = _MISSING) -> Any:
        """The object registered as `name`; `default` when given and nothing is registered under that name."""
        if name in self._components:
            return self._components[name]
        if default is not _MISSING:
            return default
        raise UnknownComponentException(
            "Nothing registered as '{}', known names are {}".format(name, ", ".join(self.names()) or "none")
        )

    def has(self, name: str) -> bool:
        return name in self._components

    def names(self) -> List[str]:
        return sorted(self._components)

    def get_or_register(self, name: str, factory: Callable[[], Any]) -> Any:
        """The object registered as `name`, building and registering it with `factory` on first use."""
        if name not in self._components:
            self.register(name, factory())
        return self._components[name]

    def __contains__(self, name: str) -> bool:
        return self.has(name)
