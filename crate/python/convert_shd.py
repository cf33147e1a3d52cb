#!/usr/bin/env python3
"""One-shot converter from the published Spiking Heidelberg Digits HDF5
distribution (shd_train.h5 / shd_test.h5) into the library's portable
event container format.

Container layout (all little-endian), described in the library docs:

    magic            8 bytes  "SPKEVT01"
    version          u16      (1)
    channels         u16
    classes          u16
    reserved         u16      (0)
    sample_count     u32
    per sample:
        sample_id    u32
        label        u16
        reserved     u16      (0)
        event_count  u32
        times        f64 * event_count   (seconds, ascending)
        units        u16 * event_count
        sample_crc32 u32      (over sample_id .. units)
    file_crc32       u32      (over magic .. last sample)

Test-split sample IDs are offset by 1,000,000 so train and test manifests
can never collide.

Usage:
    python3 python/convert_shd.py --train shd_train.h5 --test shd_test.h5 --out data/shd
"""

import argparse
import os
import struct
import sys
import zlib

MAGIC = b"SPKEVT01"
VERSION = 1
CHANNELS = 700
CLASSES = 20
TEST_ID_OFFSET = 1_000_000


def convert_split(h5_path, out_path, id_offset):
    import h5py

    with h5py.File(h5_path, "r") as f:
        times_ds = f["spikes"]["times"]
        units_ds = f["spikes"]["units"]
        labels = f["labels"][:]
        count = len(labels)
        if len(times_ds) != count or len(units_ds) != count:
            sys.exit(f"{h5_path}: spikes/labels length mismatch")

        body = bytearray()
        body += MAGIC
        body += struct.pack("<HHHHI", VERSION, CHANNELS, CLASSES, 0, count)
        total_events = 0
        for idx in range(count):
            times = times_ds[idx]
            units = units_ds[idx]
            label = int(labels[idx])
            if label < 0 or label >= CLASSES:
                sys.exit(f"{h5_path}: sample {idx} has label {label}")
            order = sorted(range(len(times)), key=lambda k: float(times[k]))
            sample = bytearray()
            sample += struct.pack("<IHHI", id_offset + idx, label, 0, len(times))
            for k in order:
                sample += struct.pack("<d", float(times[k]))
            for k in order:
                unit = int(units[k])
                if unit < 0 or unit >= CHANNELS:
                    sys.exit(f"{h5_path}: sample {idx} has unit {unit}")
                sample += struct.pack("<H", unit)
            sample += struct.pack("<I", zlib.crc32(bytes(sample)) & 0xFFFFFFFF)
            body += sample
            total_events += len(times)

        body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)

    with open(out_path, "wb") as out:
        out.write(bytes(body))
    print(f"{out_path}: {count} samples, {total_events} events")
    return count


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--train", help="path to shd_train.h5")
    parser.add_argument("--test", help="path to shd_test.h5")
    parser.add_argument("--out", required=True, help="output dataset directory")
    args = parser.parse_args()
    if not args.train and not args.test:
        parser.error("need --train and/or --test")

    try:
        import h5py  # noqa: F401
    except ImportError:
        sys.exit("h5py is required: pip install h5py")

    os.makedirs(args.out, exist_ok=True)
    if args.train:
        convert_split(args.train, os.path.join(args.out, "train.sed"), 0)
    if args.test:
        convert_split(args.test, os.path.join(args.out, "test.sed"), TEST_ID_OFFSET)
    print(
        "done; verify with: cargo run -p spikessm-core --bin spikessm -- "
        f"convert-dataset --verify {os.path.join(args.out, 'train.sed')}"
    )


if __name__ == "__main__":
    main()
