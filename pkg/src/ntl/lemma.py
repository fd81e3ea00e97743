"""Rule-based English plural-to-singular folding for tags.

Handles regular suffixes (``-ies``, ``-es``, ``-s``) and a table of irregular
plurals and words that merely end in ``s``. It is deliberately small; every
output is a fixed point, so folding is idempotent.
"""

IRREGULAR = {
    "people": "person",
    "children": "child",
    "men": "man",
    "women": "woman",
    "feet": "foot",
    "teeth": "tooth",
    "mice": "mouse",
    "geese": "goose",
    "oxen": "ox",
    "leaves": "leaf",
    "wolves": "wolf",
    "knives": "knife",
    "lives": "life",
    "wives": "wife",
    "shelves": "shelf",
    "halves": "half",
    "calves": "calf",
    "loaves": "loaf",
    "thieves": "thief",
    "elves": "elf",
    "scarves": "scarf",
    "cacti": "cactus",
    "fungi": "fungus",
    "buses": "bus",
    "gases": "gas",
    "lenses": "lens",
    "canvases": "canvas",
    "atlases": "atlas",
    "irises": "iris",
    "cactuses": "cactus",
    "octopuses": "octopus",
    "viruses": "virus",
    "campuses": "campus",
    "movies": "movie",
    "cookies": "cookie",
    "pies": "pie",
    "ties": "tie",
    "lies": "lie",
    "zombies": "zombie",
    "selfies": "selfie",
    "hippies": "hippie",
    "brownies": "brownie",
    "smoothies": "smoothie",
    "rookies": "rookie",
    "prairies": "prairie",
    "calories": "calorie",
    "headaches": "headache",
    "niches": "niche",
    "caches": "cache",
    "moustaches": "moustache",
    "mustaches": "mustache",
    "avalanches": "avalanche",
    "quiches": "quiche",
    "cliches": "cliche",
}

# Singular words that end in "s" and must not be stripped.
INVARIANT = frozenset(
    """
    news series species means physics mathematics athletics gymnastics
    politics economics graphics aerobics ethics electronics
    chaos christmas texas vegas paris los angeles kansas arkansas
    atlas canvas gas bus lens iris tennis cactus octopus virus campus
    bonus census circus genius status focus lotus chorus citrus hibiscus
    analysis basis crisis oasis thesis axis
    glass grass class dress boss moss cross mass bass brass chess
    kiss press process princess fitness business address express
    yes this thus always perhaps
    """.split()
)

_PROTECTED_ENDINGS = ("ss", "us", "is")


def singular(word: str) -> str:
    """Fold one lowercase token to its singular form."""
    if word in IRREGULAR:
        return IRREGULAR[word]
    if word in INVARIANT or len(word) <= 3 or not word.endswith("s"):
        return word
    if word.endswith(_PROTECTED_ENDINGS):
        return word
    if not any(c.isalpha() for c in word):
        return word
    if word.endswith("ies") and len(word) > 4:
        return word[:-3] + "y"
    if word.endswith("es"):
        stem = word[:-2]
        if stem.endswith(("ss", "x", "zz", "ch", "sh")):
            return stem
        # houses -> house, sizes -> size
    base = word[:-1]
    return IRREGULAR.get(base, base)


def normalize_tag(tag: str) -> str:
    return singular(tag.strip().lower())
