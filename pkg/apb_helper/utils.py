import os
import json
import hashlib

import numpy as np
import torch


def write_to_json(data, file_path):
    file_path = str(file_path)
    temp_file_path = file_path + ".tmp"
    with open(temp_file_path, 'wt', encoding='utf-8') as temp_file:
        json.dump(data, temp_file, indent=4)
    os.replace(temp_file_path, file_path)
    return


def read_from_json(file_path):
    with open(file_path, 'rt', encoding='utf-8') as file:
        data = json.load(file)
    return data


def calculate_sha256(filename):
    """Digest of a whole file, used to identify weights files in logs and reports."""
    try:
        hash_sha256 = hashlib.sha256()
        blksize = 1024 * 1024

        with open(filename, "rb") as f:
            for chunk in iter(lambda: f.read(blksize), b""):
                hash_sha256.update(chunk)

        return hash_sha256.hexdigest()
    except FileNotFoundError:
        return "NOFILE"


def derive_seed(seed, host, layer):
    # fixed odd multipliers keep (host, layer) streams apart for small seeds
    return (int(seed) * 1000003 + int(host) * 10007 + int(layer) * 101) % (2 ** 63)


def hidden_checksum(hidden_states, generated=()):
    """sha256 over the f32 bytes of per-host hidden states (host order), then the generated token ids."""
    m = hashlib.sha256()
    for hidden in hidden_states:
        m.update(np.ascontiguousarray(hidden.detach().cpu().numpy(), dtype='<f4').tobytes())
    m.update(np.asarray(list(generated), dtype='<i8').tobytes())
    return m.hexdigest()


def index_digest(index_lists):
    m = hashlib.sha256()
    for indices in index_lists:
        m.update(np.asarray(torch.as_tensor(indices, dtype=torch.long).tolist(), dtype='<i8').tobytes())
        m.update(b'|')
    return m.hexdigest()[:16]
