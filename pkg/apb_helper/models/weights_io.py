import json
import os
import struct
from dataclasses import asdict

import numpy as np
import torch
import safetensors.torch as sf
from safetensors import safe_open

from diffusers.utils import logging

from apb_helper.errors import ConfigError
from apb_helper.models.toy_llama import ModelConfig, ToyTransformer


logger = logging.get_logger(__name__)  # pylint: disable=invalid-name


MAGIC = b'APBW'
VERSION = 1

_HEADER = struct.Struct('<4sI')
# layers, hidden, heads, kv_heads, head_dim, intermediate, vocab, rope_theta, group, retain_intermediate
_CONFIG = struct.Struct('<IIIIIIIdII')
_TRAILER = struct.Struct('<Q')

LINEAR_NAMES = ('q_proj', 'k_proj', 'v_proj', 'o_proj', 'gate_proj', 'up_proj', 'down_proj')


def ordered_tensors(model: ToyTransformer):
    """Yields (name, tensor) in file order; linear weights are exposed as in x out views."""
    yield 'embed_tokens.weight', model.embed_tokens.weight
    for i, layer in enumerate(model.layers):
        for name in LINEAR_NAMES:
            yield f'layers.{i}.{name}.weight', getattr(layer, name).weight.T
        if layer.retaining_head is not None:
            yield f'layers.{i}.retaining_head.w1', layer.retaining_head.w1
            yield f'layers.{i}.retaining_head.w2', layer.retaining_head.w2


@torch.no_grad()
def save_weights(model: ToyTransformer, path):
    config = model.config
    retain = config.retain_intermediate if model.has_retaining_heads else 0

    chunks = [
        _HEADER.pack(MAGIC, VERSION),
        _CONFIG.pack(config.layers, config.hidden, config.heads, config.kv_heads, config.head_dim,
                     config.intermediate, config.vocab, float(config.rope_theta), config.group, retain),
    ]

    count = 0
    for _, tensor in ordered_tensors(model):
        array = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype='<f4')
        chunks.append(array.tobytes())
        count += array.size
    chunks.append(_TRAILER.pack(count))

    tmp_path = str(path) + '.tmp'
    with open(tmp_path, 'wb') as f:
        for chunk in chunks:
            f.write(chunk)
    os.replace(tmp_path, path)

    logger.info(f'wrote {count} weights to {path}')
    return count


@torch.no_grad()
def load_weights(path) -> ToyTransformer:
    with open(path, 'rb') as f:
        data = f.read()

    if len(data) < _HEADER.size + _CONFIG.size + _TRAILER.size:
        raise ConfigError(f'{path} is too short to be a weights file')

    magic, version = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ConfigError(f'{path} is not an APBW weights file (magic {magic!r})')
    if version != VERSION:
        raise ConfigError(f'unsupported weights file version {version}')

    layers, hidden, heads, kv_heads, head_dim, intermediate, vocab, rope_theta, group, retain = _CONFIG.unpack_from(data, _HEADER.size)
    config_kwargs = dict(layers=layers, hidden=hidden, heads=heads, kv_heads=kv_heads,
                         intermediate=intermediate, vocab=vocab, rope_theta=rope_theta)
    if retain > 0:
        config_kwargs['retain_intermediate'] = retain
    config = ModelConfig(**config_kwargs)

    if config.head_dim != head_dim or config.group != group:
        raise ConfigError(f'{path}: stored head_dim={head_dim}, group={group} disagree with the model shape')

    model = ToyTransformer(config, with_retaining_heads=retain > 0)

    offset = _HEADER.size + _CONFIG.size
    count = 0
    for name, target in ordered_tensors(model):
        size = target.numel()
        if offset + 4 * size > len(data) - _TRAILER.size:
            raise ConfigError(f'{path} ends inside tensor {name}')
        array = np.frombuffer(data, dtype='<f4', count=size, offset=offset)
        target.copy_(torch.from_numpy(array.astype(np.float32)).reshape(target.shape))
        offset += 4 * size
        count += size

    if offset + _TRAILER.size != len(data):
        raise ConfigError(f'{path} has {len(data) - offset - _TRAILER.size} unexpected trailing bytes')
    (stored,) = _TRAILER.unpack_from(data, offset)
    if stored != count:
        raise ConfigError(f'{path}: length check {stored} does not match {count} weights read')

    check_finite(model, path)
    logger.info(f'loaded {count} weights from {path}')
    return model


@torch.no_grad()
def save_safetensors(model: ToyTransformer, path):
    tensors = {name: tensor.detach().contiguous() for name, tensor in model.state_dict().items()}
    metadata = {
        'config': json.dumps(asdict(model.config)),
        'retaining_heads': '1' if model.has_retaining_heads else '0',
    }
    sf.save_file(tensors, str(path), metadata=metadata)
    logger.info(f'wrote {len(tensors)} tensors to {path}')


@torch.no_grad()
def load_safetensors(path) -> ToyTransformer:
    with safe_open(str(path), framework='pt') as f:
        metadata = f.metadata() or {}
        state = {key: f.get_tensor(key) for key in f.keys()}

    if 'config' not in metadata:
        raise ConfigError(f'{path} carries no model config metadata')

    config = ModelConfig(**json.loads(metadata['config']))
    model = ToyTransformer(config, with_retaining_heads=metadata.get('retaining_heads') == '1')

    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise ConfigError(f'{path} does not match its stored config: {e}') from e

    check_finite(model, path)
    return model


def check_finite(model: ToyTransformer, path=None):
    for name, param in model.named_parameters():
        if not bool(torch.isfinite(param).all()):
            raise ConfigError(f'{path or "weights"}: tensor {name} has non-finite entries')


def load_model(path) -> ToyTransformer:
    if str(path).endswith('.safetensors'):
        return load_safetensors(path)
    return load_weights(path)


def save_model(model: ToyTransformer, path):
    if str(path).endswith('.safetensors'):
        return save_safetensors(model, path)
    return save_weights(model, path)
