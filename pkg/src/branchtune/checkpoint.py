"""Model checkpoints: a human-readable manifest plus a raw float payload.

A checkpoint is a single file.  The header is plain text: a magic line,
one line describing the backbone, one ``tensor <name> <shape> <offset>``
line per state tensor (offsets count float elements), and a
``payload <count>`` line.  Everything after the payload line is the
little-endian IEEE-754 float32 payload.  Loading rebuilds the backbone
from the description and fills every tensor, so a round trip is bitwise
exact; freeze flags are not stored.
"""

from __future__ import annotations

import numpy as np

from .nn import BackboneSpec, Model, build_backbone
from .tensor import ShapeError

MAGIC = "branchtune-checkpoint v1"


class CheckpointFormatError(ValueError):
    """Raised when checkpoint bytes do not parse as the documented format."""


def _spec_line(spec: BackboneSpec) -> str:
    return ("spec widths={} blocks={} in_channels={} input_size={} "
            "embed_dim={} proj_hidden={} proj_out={}").format(
        ",".join(str(w) for w in spec.stage_widths),
        ",".join(str(b) for b in spec.blocks_per_stage),
        spec.in_channels, spec.input_size, spec.embed_dim,
        spec.resolved_proj_hidden(), spec.resolved_proj_out())


def _parse_spec_line(line: str) -> BackboneSpec:
    fields = {}
    for part in line.split()[1:]:
        key, _, value = part.partition("=")
        fields[key] = value
    try:
        return BackboneSpec(
            stage_widths=tuple(int(w) for w in fields["widths"].split(",")),
            blocks_per_stage=tuple(int(b) for b in fields["blocks"].split(",")),
            in_channels=int(fields["in_channels"]),
            input_size=int(fields["input_size"]),
            embed_dim=int(fields["embed_dim"]),
            proj_hidden=int(fields["proj_hidden"]),
            proj_out=int(fields["proj_out"]))
    except (KeyError, ValueError) as err:
        raise CheckpointFormatError(f"bad spec line {line!r}: {err}") from err


def save_checkpoint(model: Model, path) -> None:
    """Write the model's full state (weights, bn affine, running stats).

    Expanded models are rejected: the loader rebuilds from the backbone
    description, which has one weight per conv slot, so compress first.
    """
    if any(hasattr(conv, "branch") for conv in model.conv_layers()):
        raise ValueError("model has expanded conv slots; compress() it "
                         "before saving a checkpoint")
    state = model.named_state()
    lines = [MAGIC, _spec_line(model.spec)]
    chunks = []
    offset = 0
    for name, tensor in state:
        arr = np.ascontiguousarray(tensor.data, dtype="<f4")
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"tensor {name} {shape} {offset}")
        chunks.append(arr.tobytes())
        offset += arr.size
    lines.append(f"payload {offset}")
    with open(path, "wb") as fh:
        fh.write("\n".join(lines).encode("ascii") + b"\n")
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> Model:
    """Rebuild a model from a checkpoint file.

    The backbone comes from the manifest's description; every manifest
    tensor must exist in the rebuilt model with the identical shape and
    the entries must exactly partition the payload.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    magic = MAGIC.encode("ascii") + b"\n"
    if not raw.startswith(magic):
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    marker = raw.find(b"\npayload ")
    if marker < 0:
        raise CheckpointFormatError(f"{path}: missing payload line")
    newline = raw.find(b"\n", marker + 1)
    if newline < 0:
        raise CheckpointFormatError(f"{path}: truncated payload line")
    header_lines = raw[len(magic):marker].decode("ascii").splitlines()
    payload_line = raw[marker + 1:newline].decode("ascii")
    data = raw[newline + 1:]

    try:
        declared = int(payload_line.split()[1])
    except (IndexError, ValueError) as err:
        raise CheckpointFormatError(
            f"{path}: bad payload line {payload_line!r}") from err
    if len(data) != declared * 4:
        raise CheckpointFormatError(
            f"{path}: payload declares {declared} floats but holds "
            f"{len(data)} bytes")
    payload = np.frombuffer(data, dtype="<f4")

    if not header_lines or not header_lines[0].startswith("spec "):
        raise CheckpointFormatError(f"{path}: missing spec line")
    spec = _parse_spec_line(header_lines[0])

    entries = []
    for line in header_lines[1:]:
        parts = line.split()
        if len(parts) != 4 or parts[0] != "tensor":
            raise CheckpointFormatError(f"{path}: bad manifest line {line!r}")
        _, name, shape_text, offset_text = parts
        try:
            shape = tuple(int(s) for s in shape_text.split(","))
            offset = int(offset_text)
        except ValueError as err:
            raise CheckpointFormatError(
                f"{path}: bad manifest line {line!r}") from err
        entries.append((name, shape, offset))

    # spans must be in bounds and non-overlapping, and cover the payload
    spans = sorted((off, off + int(np.prod(shape)), name)
                   for name, shape, off in entries)
    cursor = 0
    for lo, hi, name in spans:
        if lo != cursor:
            raise CheckpointFormatError(
                f"{path}: tensor {name} at offset {lo} overlaps or leaves "
                f"a gap (expected {cursor})")
        cursor = hi
    if cursor != declared:
        raise CheckpointFormatError(
            f"{path}: manifest covers {cursor} floats of {declared}")

    model = build_backbone(spec, seed=0)
    state = dict(model.named_state())
    manifest_names = {name for name, _, _ in entries}
    if manifest_names != set(state):
        missing = sorted(set(state) - manifest_names)
        unknown = sorted(manifest_names - set(state))
        raise CheckpointFormatError(
            f"{path}: manifest does not match the described model "
            f"(missing {missing}, unknown {unknown})")
    for name, shape, offset in entries:
        tensor = state[name]
        if tuple(tensor.data.shape) != shape:
            raise ShapeError(
                f"{path}: tensor {name} has manifest shape {shape} but the "
                f"described model expects {tuple(tensor.data.shape)}")
        count = int(np.prod(shape))
        tensor.data[...] = payload[offset:offset + count].reshape(shape)
    return model
