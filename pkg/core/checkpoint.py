#!/usr/bin/env python3
"""
参数检查点格式（版本 1）

    第 1 行:  b"FDCKPT 1\\n"
    8 字节:   头部长度（小端 uint64）
    头部:     UTF-8 JSON（键排序），包含 format_version、architecture、meta 和
              tensors 列表 [{name, shape, offset, count}]，offset/count 以元素计
    数据区:   按 tensors 顺序拼接的小端 float64

同样的参数与头部总是写出逐字节相同的文件（不含时间戳）。
"""

import json
import logging
import os
import struct
from typing import Dict, Optional, Tuple

import numpy as np

from core.errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"FDCKPT"
FORMAT_VERSION = 1


def save_checkpoint(path: str, tensors: Dict[str, np.ndarray], architecture: Dict,
                    meta: Optional[Dict] = None):
    """保存命名张量与结构信息"""
    entries = []
    offset = 0
    for name in sorted(tensors):
        array = np.asarray(tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(array.shape), "offset": offset, "count": int(array.size)})
        offset += int(array.size)
    header = {
        "format_version": FORMAT_VERSION,
        "architecture": architecture,
        "meta": meta or {},
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC + b" " + str(FORMAT_VERSION).encode("ascii") + b"\n")
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for name in sorted(tensors):
            f.write(np.ascontiguousarray(tensors[name], dtype="<f8").tobytes())
    logger.info(f"检查点已保存: {path} ({len(entries)} 个张量)")


def load_checkpoint(path: str, expected_architecture: Optional[Dict] = None) -> Tuple[Dict[str, np.ndarray], Dict]:
    """
    读取检查点

    Returns:
        (tensors, header)

    Raises:
        CheckpointError: 文件缺失、格式或版本不符、结构与 expected_architecture 不一致
    """
    if not os.path.exists(path):
        raise CheckpointError(f"检查点不存在: {path}")
    with open(path, "rb") as f:
        first_line = f.readline().rstrip(b"\n")
        parts = first_line.split(b" ")
        if len(parts) != 2 or parts[0] != MAGIC:
            raise CheckpointError(f"不是检查点文件: {path}")
        try:
            version = int(parts[1])
        except ValueError:
            raise CheckpointError(f"检查点版本号非法: {parts[1]!r}")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"不支持的检查点版本 {version}，当前版本 {FORMAT_VERSION}")
        raw_len = f.read(8)
        if len(raw_len) != 8:
            raise CheckpointError("检查点头部被截断")
        (header_len,) = struct.unpack("<Q", raw_len)
        try:
            header = json.loads(f.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"检查点头部解析失败: {e}")
        payload = np.frombuffer(f.read(), dtype="<f8")

    if expected_architecture is not None and header.get("architecture") != expected_architecture:
        raise CheckpointError(
            f"检查点结构不一致: 文件 {header.get('architecture')}，期望 {expected_architecture}"
        )

    tensors = {}
    for entry in header.get("tensors", []):
        start, count = entry["offset"], entry["count"]
        if start + count > payload.size:
            raise CheckpointError(f"张量 {entry['name']} 数据被截断")
        tensors[entry["name"]] = payload[start:start + count].reshape(entry["shape"]).astype(np.float64)
    return tensors, header
