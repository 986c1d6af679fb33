#!/usr/bin/env python3
"""Regenerates crates/core/data/{cities,toy_db}.tsv deterministically.

The toy database stands in for OpenStreetMap: ten cities, each holding a few
objects for most tags of the bundled lexicon, plus shared landmark names so
that reference-point questions are learnable at desk scale.
"""
import math
import random
from pathlib import Path

DATA = Path(__file__).resolve().parent.parent / "crates" / "core" / "data"

CITIES = [
    ("Paris", 48.8566, 2.3522),
    ("Lyon", 45.7640, 4.8357),
    ("Marseille", 43.2965, 5.3698),
    ("Berlin", 52.5200, 13.4050),
    ("Hamburg", 53.5511, 9.9937),
    ("Munich", 48.1351, 11.5820),
    ("Heidelberg", 49.3988, 8.6724),
    ("London", 51.5074, -0.1278),
    ("Manchester", 53.4808, -2.2426),
    ("Edinburgh", 55.9533, -3.1883),
]
AREA_RADIUS_M = 5000
SPREAD_M = 2500

LANDMARKS = ["Town Hall", "Central Station", "Cathedral", "Old Market"]
SHOP_NAMES = ["Central", "Royal", "Corner", "Star", "Garden", "Bridge", "Park View", "Golden Lion"]
EXTRA_KEYS = [
    ("website", 0.35, lambda r, i: f"www.place{i}.example"),
    ("opening_hours", 0.35, lambda r, i: r.choice(["Mo-Fr 09:00-18:00", "24/7", "Mo-Sa 08:00-20:00"])),
    ("phone", 0.25, lambda r, i: f"+00 {r.randint(100, 999)} {r.randint(1000, 9999)}"),
    ("wheelchair", 0.3, lambda r, i: r.choice(["yes", "no", "limited"])),
    ("operator", 0.2, lambda r, i: r.choice(["City Council", "Private", "Cooperative"])),
]


def lexicon_tags():
    tags = []
    for line in (DATA / "lexicon.tsv").read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        tag = line.split("\t")[1]
        if tag not in tags:
            tags.append(tag)
    return tags


def offset(lat, lon, r, max_m):
    d = max_m * math.sqrt(r.random())
    theta = r.random() * 2 * math.pi
    dlat = d * math.cos(theta) / 111_320
    dlon = d * math.sin(theta) / (111_320 * math.cos(math.radians(lat)))
    return lat + dlat, lon + dlon


def main():
    r = random.Random(7)
    tags = lexicon_tags()
    with open(DATA / "cities.tsv", "w") as f:
        f.write("# name\tlat\tlon\tradius_m\n")
        for name, lat, lon in CITIES:
            f.write(f"{name}\t{lat:.4f}\t{lon:.4f}\t{AREA_RADIUS_M}\n")
    rows = []
    next_id = 1
    for name, clat, clon in CITIES:
        for lm in LANDMARKS:
            lat, lon = offset(clat, clon, r, SPREAD_M * 0.6)
            rows.append((next_id, lat, lon, f"name={lm};tourism=attraction"))
            next_id += 1
        for tag in tags:
            if r.random() < 0.12:
                continue
            for _ in range(r.randint(2, 7)):
                lat, lon = offset(clat, clon, r, SPREAD_M)
                kv = [tag]
                if r.random() < 0.3:
                    kv.append(f"name={r.choice(SHOP_NAMES)}")
                for key, p, gen in EXTRA_KEYS:
                    if r.random() < p:
                        kv.append(f"{key}={gen(r, next_id)}")
                rows.append((next_id, lat, lon, ";".join(kv)))
                next_id += 1
    with open(DATA / "toy_db.tsv", "w") as f:
        f.write("# id\tlat\tlon\tkey=value;...\n")
        for i, lat, lon, kv in rows:
            f.write(f"{i}\t{lat:.6f}\t{lon:.6f}\t{kv}\n")


if __name__ == "__main__":
    main()
