"""Reusable value validators for the configuration objects."""
from collections.abc import Iterable

from django.core.exceptions import ImproperlyConfigured, ValidationError
from django.utils.deconstruct import deconstructible


@deconstructible
class RangeValidator(object):
    """
    Checks that a number lies inside an interval.

    Either bound may be ``None``. Bounds are inclusive unless told otherwise.
    """

    def __init__(self, lower=None, upper=None, lower_inclusive=True, upper_inclusive=True):
        self.lower = lower
        self.upper = upper
        self.lower_inclusive = lower_inclusive
        self.upper_inclusive = upper_inclusive

    def __eq__(self, other):
        return (isinstance(other, RangeValidator) and
                (self.lower, self.upper, self.lower_inclusive, self.upper_inclusive) ==
                (other.lower, other.upper, other.lower_inclusive, other.upper_inclusive))

    def __call__(self, value):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError('%(value)r is not a number.', code='invalid', params={'value': value})
        if self.lower is not None:
            if value < self.lower or (value == self.lower and not self.lower_inclusive):
                op = '>=' if self.lower_inclusive else '>'
                raise ValidationError('Ensure this value is %(op)s %(bound)s (got %(value)s).', code='min_value',
                                      params={'op': op, 'bound': self.lower, 'value': value})
        if self.upper is not None:
            if value > self.upper or (value == self.upper and not self.upper_inclusive):
                op = '<=' if self.upper_inclusive else '<'
                raise ValidationError('Ensure this value is %(op)s %(bound)s (got %(value)s).', code='max_value',
                                      params={'op': op, 'bound': self.upper, 'value': value})


def positive():
    return RangeValidator(0, lower_inclusive=False)


@deconstructible
class IntegerValidator(object):
    """Rejects floats and booleans where a count is expected."""

    def __eq__(self, other):
        return isinstance(other, IntegerValidator)

    def __call__(self, value):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError('%(value)r is not an integer.', code='invalid', params={'value': value})


@deconstructible
class ChoiceValidator(object):
    """Checks that a value, or every item of a sequence value, is one of ``choices``."""

    def __init__(self, choices, many=False):
        self.choices = tuple(choices)
        self.many = many

    def __eq__(self, other):
        return isinstance(other, ChoiceValidator) and (self.choices, self.many) == (other.choices, other.many)

    def __call__(self, value):
        values = value if self.many else [value]
        if self.many and (isinstance(value, str) or not isinstance(value, Iterable)):
            raise ValidationError('%(value)r is not a sequence.', code='invalid', params={'value': value})
        for item in values:
            if item not in self.choices:
                raise ValidationError('%(item)r is not one of %(choices)s.', code='invalid_choice',
                                      params={'item': item, 'choices': ', '.join(repr(c) for c in self.choices)})


@deconstructible
class LengthValidator(object):
    """Checks the length of a sequence value, and optionally every item with ``item_validator``."""

    def __init__(self, minimum=1, maximum=None, item_validator=None):
        self.minimum = minimum
        self.maximum = maximum
        self.item_validator = item_validator

    def __eq__(self, other):
        return (isinstance(other, LengthValidator) and
                (self.minimum, self.maximum, self.item_validator) ==
                (other.minimum, other.maximum, other.item_validator))

    def __call__(self, value):
        try:
            length = len(value)
        except TypeError:
            raise ValidationError('%(value)r has no length.', code='invalid', params={'value': value})
        if length < self.minimum or (self.maximum is not None and length > self.maximum):
            raise ValidationError('Expected between %(min)s and %(max)s items, got %(length)s.', code='length',
                                  params={'min': self.minimum, 'max': self.maximum or 'any', 'length': length})
        if self.item_validator is not None:
            for item in value:
                self.item_validator(item)


def validate_fields(instance, field_validators, extra_errors=None):
    """
    Run ``field_validators`` (a mapping of attribute name to validator list) against ``instance``.

    All failures are collected and reported together as one ``ImproperlyConfigured``.
    """
    errors = {}
    for name, validators in field_validators.items():
        value = getattr(instance, name)
        for validator in validators:
            try:
                validator(value)
            except ValidationError as e:
                errors.setdefault(name, []).extend(e.messages)
                break
    for name, message in (extra_errors or {}).items():
        errors.setdefault(name, []).append(message)
    if errors:
        details = '; '.join('%s: %s' % (name, ' '.join(messages)) for name, messages in sorted(errors.items()))
        raise ImproperlyConfigured('%s is invalid: %s' % (type(instance).__name__, details))
