"""Logging setup for the command line and for training records."""
import json
import logging

#: Attribute of a :class:`logging.LogRecord` holding a structured payload.
RECORD_ATTR = 'record'


class JsonLinesFormatter(logging.Formatter):
    """Formats records as one JSON object per line, merging any structured ``record`` payload."""

    def format(self, record):
        payload = {
            'level': record.levelname,
            'logger': record.name,
            'message': record.getMessage(),
        }
        payload.update(getattr(record, RECORD_ATTR, None) or {})
        return json.dumps(payload, sort_keys=True)


class StructuredOnlyFilter(logging.Filter):
    def filter(self, record):
        return getattr(record, RECORD_ATTR, None) is not None


def configure_logging(level=logging.INFO, json_lines_path=None):
    """
    Install a console handler on the ``lungtrack`` logger and, optionally, a JSON-lines file handler.

    The file handler only receives records that carry a structured payload (training steps, epochs,
    stage results), so the file can be read back as a table.
    """
    logger = logging.getLogger('lungtrack')
    logger.setLevel(level)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    console = logging.StreamHandler()
    console.setFormatter(logging.Formatter('%(asctime)s %(levelname)s %(name)s: %(message)s'))
    logger.addHandler(console)

    if json_lines_path is not None:
        structured = logging.FileHandler(str(json_lines_path), mode='a', encoding='utf-8')
        structured.setFormatter(JsonLinesFormatter())
        structured.addFilter(StructuredOnlyFilter())
        logger.addHandler(structured)
    logger.propagate = False
    return logger
