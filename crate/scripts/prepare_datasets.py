#!/usr/bin/env python3
"""Builds the benchmark datasets under data/ from package-registry sources.

    umls/, kinship/   copied from the pykeen wheel (standard splits)
    wn18/             rebuilt from the WordNet 3.0 database files shipped in
                      the pattern3 sdist: the 18 WN18 pointer types between
                      synsets, entities with at least 5 relation endpoints,
                      random 5000/5000 valid/test split
    countries_s1/     rebuilt from the world-countries npm package: countries,
                      regions and subregions linked by locatedIn/neighborOf;
                      24 valid and 24 test countries lose their region edge

Usage: python3 scripts/prepare_datasets.py [--cache DIR] [--out DIR]
"""

import argparse
import collections
import io
import json
import os
import random
import re
import tarfile
import urllib.request
import zipfile

PYPI = "https://pypi.org/pypi/{}/json"
NPM = "https://registry.npmjs.org/{}/{}"

WN18_POINTERS = {
    "@": "_hypernym",
    "~": "_hyponym",
    "@i": "_instance_hypernym",
    "~i": "_instance_hyponym",
    "#m": "_member_holonym",
    "%m": "_member_meronym",
    "#p": "_part_of",
    "%p": "_has_part",
    "+": "_derivationally_related_form",
    ";c": "_synset_domain_topic_of",
    "-c": "_member_of_domain_topic",
    ";r": "_synset_domain_region_of",
    "-r": "_member_of_domain_region",
    ";u": "_synset_domain_usage_of",
    "-u": "_member_of_domain_usage",
    "^": "_also_see",
    "$": "_verb_group",
    "&": "_similar_to",
}
WN18_MIN_DEGREE = 5
WN18_HELD_OUT = 5000
COUNTRIES_HELD_OUT = 24
SEED = 20180101


def fetch(url, cache):
    os.makedirs(cache, exist_ok=True)
    path = os.path.join(cache, url.rsplit("/", 1)[-1])
    if not os.path.exists(path):
        print("fetching", url)
        with urllib.request.urlopen(url, timeout=600) as resp, open(path, "wb") as f:
            f.write(resp.read())
    return path


def pypi_file(name, version, filename, cache):
    path = os.path.join(cache, filename)
    if os.path.exists(path):
        return path
    meta = json.load(urllib.request.urlopen(PYPI.format(name), timeout=60))
    for u in meta["releases"][version]:
        if u["filename"] == filename:
            return fetch(u["url"], cache)
    raise SystemExit(f"no {filename} artifact for {name}=={version}")


def write_split(out_dir, name, triples):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name + ".txt"), "w", encoding="utf-8") as f:
        for s, r, o in triples:
            f.write(f"{s}\t{r}\t{o}\n")


def build_pykeen(cache, out):
    wheel = pypi_file("pykeen", "1.11.1", "pykeen-1.11.1-py3-none-any.whl", cache)
    z = zipfile.ZipFile(wheel)
    for src, dst in (("umls", "umls"), ("kinships", "kinship")):
        for split in ("train", "valid", "test"):
            data = z.read(f"pykeen/datasets/{src}/{split}.txt").decode("utf-8")
            os.makedirs(os.path.join(out, dst), exist_ok=True)
            with open(os.path.join(out, dst, split + ".txt"), "w", encoding="utf-8") as f:
                f.write(data)


def wordnet_triples(tar):
    triples = set()
    files = [m for m in tar.getmembers() if re.search(r"wordnet/dict/data\.(noun\d|verb|adj|adv)$", m.name)]
    for member in files:
        for line in io.TextIOWrapper(tar.extractfile(member), encoding="latin-1"):
            if line.startswith("  "):
                continue
            parts = line.split("|")[0].split()
            offset, ss_type, words = parts[0], parts[2], int(parts[3], 16)
            i = 4 + 2 * words
            n_ptr = int(parts[i])
            i += 1
            for _ in range(n_ptr):
                sym, target, pos, _ = parts[i : i + 4]
                i += 4
                if sym in WN18_POINTERS:
                    s = offset + ("a" if ss_type == "s" else ss_type)
                    o = target + ("a" if pos == "s" else pos)
                    if s != o:
                        triples.add((s, WN18_POINTERS[sym], o))
    return triples


def build_wn18(cache, out):
    sdist = pypi_file("pattern3", "3.0.0", "pattern3-3.0.0.tar.gz", cache)
    triples = wordnet_triples(tarfile.open(sdist))
    degree = collections.Counter()
    for s, _, o in triples:
        degree[s] += 1
        degree[o] += 1
    kept = sorted(t for t in triples if degree[t[0]] >= WN18_MIN_DEGREE and degree[t[2]] >= WN18_MIN_DEGREE)
    rng = random.Random(SEED)
    rng.shuffle(kept)
    # held-out triples must only mention entities that remain in train
    train_degree = collections.Counter()
    for s, _, o in kept:
        train_degree[s] += 1
        train_degree[o] += 1
    held = []
    train = []
    for t in kept:
        s, _, o = t
        if len(held) < 2 * WN18_HELD_OUT and train_degree[s] > 1 and train_degree[o] > 1:
            held.append(t)
            train_degree[s] -= 1
            train_degree[o] -= 1
        else:
            train.append(t)
    write_split(os.path.join(out, "wn18"), "train", sorted(train))
    write_split(os.path.join(out, "wn18"), "valid", sorted(held[:WN18_HELD_OUT]))
    write_split(os.path.join(out, "wn18"), "test", sorted(held[WN18_HELD_OUT:]))


def slug(name):
    return re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_")


def build_countries(cache, out):
    tgz = fetch(NPM.format("world-countries", "-/world-countries-5.1.0.tgz"), cache)
    data = json.load(tarfile.open(tgz).extractfile("package/countries.json"))
    data = [c for c in data if c["region"] and c["subregion"] and c["region"] != "Antarctic"]
    name = {c["cca3"]: slug(c["name"]["common"]) for c in data}
    located, neighbours = [], set()
    for c in data:
        me = name[c["cca3"]]
        located.append((me, "locatedIn", slug(c["subregion"])))
        located.append((me, "locatedIn", slug(c["region"])))
        for b in c["borders"]:
            if b in name:
                neighbours.add((me, "neighborOf", name[b]))
                neighbours.add((name[b], "neighborOf", me))
    sub_region = sorted({(slug(c["subregion"]), "locatedIn", slug(c["region"])) for c in data})
    region_of = {name[c["cca3"]]: slug(c["region"]) for c in data}
    adjacency = collections.defaultdict(set)
    for s, _, o in neighbours:
        adjacency[s].add(o)

    rng = random.Random(SEED)
    countries = sorted(region_of)
    rng.shuffle(countries)
    held = []
    held_set = set()
    for c in countries:
        if len(held) == 2 * COUNTRIES_HELD_OUT:
            break
        # every held-out country keeps at least one neighbour with a known region
        if any(n not in held_set for n in adjacency[c]):
            held.append(c)
            held_set.add(c)
    valid_c, test_c = held[:COUNTRIES_HELD_OUT], held[COUNTRIES_HELD_OUT:]
    train = [t for t in located if not (t[0] in held_set and t[2] == region_of[t[0]])]
    train += sub_region + sorted(neighbours)
    d = os.path.join(out, "countries_s1")
    write_split(d, "train", sorted(train))
    write_split(d, "valid", sorted((c, "locatedIn", region_of[c]) for c in valid_c))
    write_split(d, "test", sorted((c, "locatedIn", region_of[c]) for c in test_c))


def main():
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    ap = argparse.ArgumentParser()
    ap.add_argument("--cache", default=os.path.join(root, "target", "dataset-cache"))
    ap.add_argument("--out", default=os.path.join(root, "data"))
    args = ap.parse_args()
    build_pykeen(args.cache, args.out)
    build_countries(args.cache, args.out)
    build_wn18(args.cache, args.out)
    for d in sorted(os.listdir(args.out)):
        sizes = [sum(1 for _ in open(os.path.join(args.out, d, s + ".txt"))) for s in ("train", "valid", "test")]
        print(d, *sizes)


if __name__ == "__main__":
    main()
