#!/usr/bin/env python3
"""Regenerates data/vectors.txt: small clustered embeddings for tests.

Each word gets a random direction nudged toward its category center;
listed synonym pairs are placed close to their partner.
"""
import numpy as np

DIM = 48
SEED = 20240611

CATEGORIES = {
    "animal": "animal dog puppy canine cat kitten feline horse bird sheep cow giraffe elephant zebra bear mouse carnivore",
    "vehicle": "vehicle car automobile bus truck bicycle bike boat vessel motorcycle train airplane plane rocket",
    "furniture": "furniture chair seat bench couch sofa table desk bed shelf cabinet",
    "food": "food fruit apple banana orange pizza cake sandwich donut carrot broccoli meal bread",
    "drink": "drink beverage beer wine coffee tea juice water brew",
    "container": "container box vase bottle cup mug bowl glass jar basket bag",
    "device": "device machine computer laptop notebook phone television tv screen monitor keyboard clock lamp remote",
    "person": "person people man woman boy girl child kid male female player skier surfer crowd group",
    "nature": "plant flower tree grass sky cloud mountain beach field water",
    "object": "ball toy kite umbrella hat shoe sign hydrant knife fork spoon guitar book picture window door wall floor street road room kitchen table computer",
    "clothing": "shirt jacket dress tie coat jeans scarf glove helmet",
    "sports": "racket bat skateboard surfboard ski snowboard frisbee hoop basketball baseball tennis",
    "kitchen": "oven stove sink refrigerator microwave toaster plate pan pot",
    "outdoor": "building house tower bridge fence pole hill river lake ocean wave snow tent",
    "bath": "toilet bathtub tub towel mirror soap",
    "quantity": "pair bunch piece couple lot front top side middle",
}

SYNONYMS = [
    ("couch", "sofa"),
    ("car", "automobile"),
    ("cup", "mug"),
    ("television", "tv"),
    ("bicycle", "bike"),
    ("airplane", "plane"),
    ("kid", "child"),
    ("screen", "monitor"),
]


def main():
    rng = np.random.default_rng(SEED)
    centers = {c: rng.normal(size=DIM) for c in CATEGORIES}
    words = []
    vecs = {}
    for cat, members in CATEGORIES.items():
        for w in members.split():
            if w in vecs:
                continue
            v = rng.normal(size=DIM) + 0.3 * centers[cat]
            vecs[w] = v / np.linalg.norm(v)
            words.append(w)
    for a, b in SYNONYMS:
        v = vecs[a] + 0.25 * rng.normal(size=DIM) / np.sqrt(DIM)
        vecs[b] = v / np.linalg.norm(v)
    with open("vectors.txt", "w") as f:
        f.write(f"{len(words)} {DIM}\n")
        for w in words:
            f.write(w + " " + " ".join(f"{x:.6f}" for x in vecs[w]) + "\n")


if __name__ == "__main__":
    main()
