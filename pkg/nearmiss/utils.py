from hashlib import sha256
from json import dumps
from pathlib import Path
from zlib import crc32

import numpy as np
import pandas as pd


def hash_file(path, chunk_size=1 << 20) -> str:
    '''
    Compute the hex SHA-256 digest of a file's contents.

    :param path: Path of the file to hash.
    :param chunk_size: Read size in bytes.
    '''

    digest = sha256()
    with open(path, 'rb') as fh:
        for chunk in iter(lambda: fh.read(chunk_size), b''):
            digest.update(chunk)
    return digest.hexdigest()


def hash_tree(path) -> str:
    '''
    Hash a file, or every file below a directory in sorted path order.

    :param path: File or directory to hash.
    '''

    path = Path(path)
    if path.is_file():
        return hash_file(path)

    digest = sha256()
    for child in sorted(p for p in path.rglob('*') if p.is_file()):
        digest.update(str(child.relative_to(path)).encode('utf-8'))
        digest.update(hash_file(child).encode('utf-8'))
    return digest.hexdigest()


def hash_config(data: object) -> str:
    '''
    Hash structured (JSON-serializable) data independently of key order.

    :param data: The structured data to hash.
    '''

    try:
        encoded = dumps(data, sort_keys=True, separators=(',', ':'), default=str)
    except (TypeError, ValueError) as error:
        raise ValueError('failed to serialize data for hashing', error.args)

    return sha256(encoded.encode('utf-8')).hexdigest()


def stage_seed(seed: int, stage: str) -> np.random.SeedSequence:
    '''
    Derive the named random substream of a pipeline stage from the global seed.

    :param seed: The global pipeline seed.
    :param stage: Stage name (e.g. "fit", "synth").
    '''

    return np.random.SeedSequence(entropy=int(seed), spawn_key=(crc32(stage.encode('utf-8')),))


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    '''
    Random generator for a named pipeline stage (see stage_seed).

    :param seed: The global pipeline seed.
    :param stage: Stage name.
    '''

    return np.random.default_rng(stage_seed(seed, stage))


def wrap_angle(angle):
    '''
    Wrap angles to the half-open interval (-pi, pi].

    :param angle: Scalar or array of angles in radians.
    '''

    wrapped = np.mod(np.asarray(angle, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    # mod maps +pi to -pi; keep the closed end at +pi
    return np.where(wrapped == -np.pi, np.pi, wrapped)


def provenance(seed: int, config_hash: str) -> str:
    '''
    Provenance line carried as the first comment row of every CSV output.

    :param seed: The global pipeline seed.
    :param config_hash: Hash of the pipeline configuration.
    '''

    return f"seed={int(seed)} config={config_hash}"


def write_csv(path, frame: pd.DataFrame, comment: str = None) -> None:
    '''
    Write a table as CSV, optionally preceded by a "# <comment>" line.

    :param path: Output path; parent directories are created.
    :param frame: The table to write.
    :param comment: Optional comment line.
    '''

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as fh:
        if comment:
            fh.write(f"# {comment}\n")
        frame.to_csv(fh, index=False, lineterminator='\n')


def read_csv(path, **kwargs) -> pd.DataFrame:
    '''
    Read a CSV written by write_csv, skipping comment lines.

    :param path: Path of the CSV file.
    '''

    return pd.read_csv(path, comment='#', **kwargs)


def stage_entropy(seed: int, stage: str) -> int:
    '''
    A 64-bit integer seed for a named pipeline stage (see stage_seed), for APIs
    that take a plain integer.

    :param seed: The global pipeline seed.
    :param stage: Stage name.
    '''

    return int(stage_seed(seed, stage).generate_state(1, np.uint64)[0])
