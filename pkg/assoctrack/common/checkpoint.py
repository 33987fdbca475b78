#!/usr/bin/env python

"""
This module reads and writes model checkpoints.

Layout: magic b'TRAX1', uint32 little-endian header length, UTF-8 JSON
header, then float32 little-endian tensor data in manifest order.
"""

import json
import logging
import struct
from typing import Optional, Tuple
import numpy as np
import torch
from assoctrack.common.tokenizer import FeatureStandardizer
from assoctrack.common.transformer import AssociationTransformer, ModelConfig
from assoctrack.common.utils import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b'TRAX1'


def dumps_checkpoint(model:AssociationTransformer,
                     metadata:Optional[dict]=None) -> bytes:
    """
    Serialize model into checkpoint bytes.

    Args:
        model: Model to save.
        metadata: Extra JSON-serializable header entries, e.g. the train
                  configuration.
    """
    manifest = []
    blobs = []
    offset = 0
    for name, tensor in model.state_dict().items():
        data = tensor.detach().cpu().numpy().astype('<f4')
        manifest.append({'name': name,
                         'shape': list(data.shape),
                         'offset': offset})
        blob = data.tobytes(order='C')
        blobs.append(blob)
        offset += len(blob)
    header = {
        'hyperparameters': model.config.to_dict(),
        'feature_config': list(model.config.channels),
        'standardization': model.standardizer.to_dict(),
        'tensors': manifest,
        'metadata': metadata or {},
        }
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    return b''.join([MAGIC, struct.pack('<I', len(header_bytes)),
                     header_bytes] + blobs)


def save_checkpoint(path:str, model:AssociationTransformer,
                    metadata:Optional[dict]=None):
    with open(path, 'wb') as f:
        f.write(dumps_checkpoint(model, metadata))
    logger.info("checkpoint written to %s", path)


def read_header(data:bytes) -> Tuple[dict, int]:
    """
    Parse header of checkpoint bytes.

    Returns:
        tuple: (header dict, byte offset of tensor data)
    """
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a TRAX1 checkpoint")
    start = len(MAGIC) + 4
    if len(data) < start:
        raise CheckpointError("truncated checkpoint header")
    length, = struct.unpack('<I', data[len(MAGIC):start])
    try:
        header = json.loads(data[start:start + length].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError("corrupt checkpoint header: {}".format(err))
    return header, start + length


def loads_checkpoint(data:bytes) -> Tuple[AssociationTransformer, dict]:
    """
    Restore model and header from checkpoint bytes.
    """
    header, base = read_header(data)
    config = ModelConfig(**header['hyperparameters'])
    standardizer = FeatureStandardizer.from_dict(header['standardization'])
    model = AssociationTransformer(config, standardizer)
    state = {}
    for entry in header['tensors']:
        count = int(np.prod(entry['shape'])) if entry['shape'] else 1
        begin = base + entry['offset']
        end = begin + 4 * count
        if end > len(data):
            raise CheckpointError("tensor {} exceeds file size".format(
                entry['name']))
        array = np.frombuffer(data[begin:end], dtype='<f4')
        state[entry['name']] = torch.from_numpy(
                array.reshape(entry['shape']).astype(np.float32))
    expected = model.state_dict()
    missing = set(expected) - set(state)
    if missing:
        raise CheckpointError("missing tensors: {}".format(sorted(missing)))
    for name, tensor in expected.items():
        state[name] = state[name].to(tensor.dtype)
    model.load_state_dict(state)
    model.eval()
    return model, header


def load_checkpoint(path:str) -> Tuple[AssociationTransformer, dict]:
    with open(path, 'rb') as f:
        return loads_checkpoint(f.read())
