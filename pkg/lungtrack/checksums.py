"""Content hashes of artifacts and configurations."""
import hashlib
import json
import os

__all__ = ['file_sha256', 'tree_sha256', 'fingerprint', 'derive_seed']

CHUNK_SIZE = 1 << 20


def file_sha256(path):
    digest = hashlib.sha256()
    with open(str(path), 'rb') as fp:
        for chunk in iter(lambda: fp.read(CHUNK_SIZE), b''):
            digest.update(chunk)
    return digest.hexdigest()


def iter_files(root, exclude=()):
    """Relative paths of every file below ``root`` in sorted order, skipping names in ``exclude``."""
    for directory, subdirs, files in os.walk(str(root)):
        subdirs.sort()
        for name in sorted(files):
            if name in exclude:
                continue
            path = os.path.join(directory, name)
            yield os.path.relpath(path, str(root)).replace(os.sep, '/')


def tree_sha256(root, exclude=(), hashers=None):
    """
    Mapping of relative path to SHA-256 for every file below ``root``.

    ``hashers`` maps a file suffix to a function hashing such files by content instead of by bytes.
    """
    hashers = hashers or {}
    digests = {}
    for relative in iter_files(root, exclude):
        hasher = hashers.get(os.path.splitext(relative)[1], file_sha256)
        digests[relative] = hasher(os.path.join(str(root), relative))
    return digests


def canonical_json(data):
    return json.dumps(data, sort_keys=True, separators=(',', ':'), default=str)


def fingerprint(*parts):
    """
    SHA-256 over the canonical JSON of ``parts``.

    Mappings are key-sorted, so equal configurations give equal fingerprints whatever their key order.
    """
    return hashlib.sha256(canonical_json(list(parts)).encode('utf-8')).hexdigest()


def derive_seed(seed, name):
    """A 31-bit seed for ``name`` drawn deterministically from the global ``seed``."""
    return int(hashlib.sha256(('%s:%s' % (seed, name)).encode('utf-8')).hexdigest()[:8], 16) & 0x7FFFFFFF
