"""Shared behaviour of the configuration dataclasses."""
import dataclasses

from django.core.exceptions import ImproperlyConfigured

from .validators import validate_fields


class BaseConfig(object):
    """
    Mixin for configuration dataclasses.

    Subclasses list their field constraints in ``field_validators`` and may add cross-field checks by overriding
    :meth:`clean`, which returns a mapping of field name to error message.
    """

    field_validators = {}

    def clean(self):
        return {}

    def validate(self):
        validate_fields(self, self.field_validators, self.clean())
        return self

    def as_dict(self):
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data):
        if data is None:
            return cls()
        if not isinstance(data, dict):
            raise ImproperlyConfigured('%s expects a mapping, got %r.' % (cls.__name__, data))
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ImproperlyConfigured('Unknown %s option(s): %s.' % (cls.__name__, ', '.join(unknown)))
        return cls(**{key: _tuples(value) for key, value in data.items()})

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _tuples(value):
    # YAML gives lists; configs store immutable tuples.
    if isinstance(value, list):
        return tuple(_tuples(item) for item in value)
    return value


def _plain(value):
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    return value
