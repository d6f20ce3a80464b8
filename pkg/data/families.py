"""
Schema Families
Parent/child schema templates and the concept lexicon used to word utterances.
Held-out schemas swap aliases for synonyms, so their wording drifts away from
what the base parser was trained on.
"""

from dataclasses import dataclass
from typing import Dict, List, Tuple

from data.schema import INT, TEXT, Column, Schema


@dataclass(frozen=True)
class Concept:
    """A column concept: aliases for training wording, synonyms for shifted wording"""
    name: str
    kind: str
    aliases: Tuple[str, ...]
    synonyms: Tuple[str, ...]
    low: int = 0
    high: int = 0
    pool: Tuple[str, ...] = ()


@dataclass(frozen=True)
class TableWords:
    name: str
    aliases: Tuple[str, ...]
    synonyms: Tuple[str, ...]


def _num(name, aliases, synonyms, low, high) -> Concept:
    return Concept(name, INT, tuple(aliases), tuple(synonyms), low=low, high=high)


def _text(name, aliases, synonyms, pool) -> Concept:
    return Concept(name, TEXT, tuple(aliases), tuple(synonyms), pool=tuple(pool))


CONCEPTS: Dict[str, Concept] = {c.name: c for c in (
    _num("age", ["age"], ["years", "oldness"], 18, 80),
    _num("salary", ["salary", "pay"], ["wage", "earnings"], 1000, 9000),
    _num("price", ["price", "cost"], ["charge", "fee"], 5, 500),
    _num("rating", ["rating", "score"], ["stars", "marks"], 1, 10),
    _num("capacity", ["capacity"], ["seats", "room"], 10, 500),
    _num("weight", ["weight"], ["mass", "heaviness"], 1, 200),
    _num("duration", ["duration", "length"], ["runtime", "span"], 10, 300),
    _num("budget", ["budget"], ["funds", "funding"], 100, 9000),
    _num("year", ["year"], ["vintage", "season"], 1950, 2020),
    _num("height", ["height"], ["tallness", "stature"], 100, 220),
    _num("pages", ["pages"], ["leaves", "sheets"], 50, 900),
    _text("city", ["city"], ["town", "municipality"],
          ["paris", "tokyo", "lima", "cairo", "oslo", "delhi", "rome", "quito"]),
    _text("color", ["color", "colour"], ["shade", "hue"],
          ["red", "blue", "green", "black", "white", "yellow"]),
    _text("country", ["country", "nation"], ["homeland", "realm"],
          ["france", "japan", "peru", "egypt", "norway", "india", "italy", "chile"]),
    _text("genre", ["genre", "type"], ["style", "kind"],
          ["drama", "comedy", "horror", "jazz", "rock", "fantasy"]),
    _text("status", ["status"], ["standing", "condition"],
          ["active", "retired", "pending", "closed"]),
    _text("region", ["region", "area"], ["zone", "territory"],
          ["north", "south", "east", "west", "central"]),
    _text("language", ["language"], ["tongue", "idiom"],
          ["english", "spanish", "arabic", "hindi", "french"]),
    _text("level", ["level"], ["tier", "echelon"],
          ["junior", "senior", "expert", "novice"]),
    _text("category", ["category"], ["class", "group"],
          ["gold", "silver", "bronze", "basic"]),
)}

TABLES: Dict[str, TableWords] = {t.name: t for t in (
    TableWords("department", ("departments", "department"), ("divisions", "units")),
    TableWords("employee", ("employees", "staff"), ("workers", "personnel")),
    TableWords("school", ("schools", "school"), ("academies", "colleges")),
    TableWords("student", ("students", "student"), ("pupils", "learners")),
    TableWords("store", ("stores", "shops"), ("outlets", "boutiques")),
    TableWords("product", ("products", "items"), ("goods", "wares")),
    TableWords("airline", ("airlines", "airline"), ("carriers", "operators")),
    TableWords("flight", ("flights", "flight"), ("trips", "journeys")),
    TableWords("author", ("authors", "writers"), ("novelists", "poets")),
    TableWords("book", ("books", "book"), ("volumes", "titles")),
    TableWords("studio", ("studios", "studio"), ("producers", "companies")),
    TableWords("movie", ("movies", "films"), ("pictures", "features")),
    TableWords("label", ("labels", "label"), ("imprints", "houses")),
    TableWords("album", ("albums", "records"), ("releases", "discs")),
    TableWords("team", ("teams", "team"), ("squads", "sides")),
    TableWords("player", ("players", "player"), ("athletes", "sportsmen")),
    TableWords("hospital", ("hospitals", "hospital"), ("clinics", "infirmaries")),
    TableWords("doctor", ("doctors", "doctor"), ("physicians", "medics")),
    TableWords("maker", ("makers", "manufacturers"), ("automakers", "builders")),
    TableWords("car", ("cars", "car"), ("vehicles", "autos")),
    TableWords("owner", ("owners", "owner"), ("keepers", "guardians")),
    TableWords("dog", ("dogs", "dog"), ("hounds", "pets")),
    TableWords("club", ("clubs", "club"), ("societies", "circles")),
    TableWords("member", ("members", "member"), ("affiliates", "associates")),
    TableWords("museum", ("museums", "museum"), ("galleries", "exhibits")),
    TableWords("painting", ("paintings", "painting"), ("artworks", "canvases")),
    TableWords("farm", ("farms", "farm"), ("ranches", "estates")),
    TableWords("animal", ("animals", "animal"), ("beasts", "creatures")),
    TableWords("publisher", ("publishers", "publisher"), ("presses", "printers")),
    TableWords("magazine", ("magazines", "magazine"), ("periodicals", "journals")),
)}


@dataclass(frozen=True)
class Family:
    """parent(id, name, p_num, p_cat) <- child(id, name, c_num1, c_num2, c_cat, parent_id)"""
    parent: str
    child: str
    p_num: str
    p_cat: str
    c_num1: str
    c_num2: str
    c_cat: str

    @property
    def schema_id(self) -> str:
        return f"{self.parent}_{self.child}"

    @property
    def fk_column(self) -> str:
        return f"{self.parent}_id"


# Train schemas come first; the last three are held out by default.
FAMILIES: Tuple[Family, ...] = (
    Family("department", "employee", "budget", "region", "age", "salary", "city"),
    Family("school", "student", "capacity", "region", "age", "rating", "language"),
    Family("store", "product", "capacity", "city", "price", "weight", "color"),
    Family("airline", "flight", "budget", "country", "duration", "price", "status"),
    Family("author", "book", "age", "country", "pages", "year", "genre"),
    Family("studio", "movie", "budget", "city", "duration", "year", "genre"),
    Family("label", "album", "year", "country", "rating", "price", "genre"),
    Family("team", "player", "budget", "city", "age", "height", "level"),
    Family("hospital", "doctor", "capacity", "region", "age", "salary", "language"),
    Family("maker", "car", "year", "country", "price", "weight", "color"),
    Family("owner", "dog", "age", "city", "weight", "height", "color"),
    Family("club", "member", "budget", "region", "age", "rating", "status"),
    Family("museum", "painting", "capacity", "city", "year", "price", "category"),
    Family("farm", "animal", "budget", "region", "weight", "age", "category"),
    Family("publisher", "magazine", "year", "country", "pages", "price", "language"),
)

CHILD_NAMES = (
    "alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi",
    "ivan", "judy", "karl", "liam", "mona", "nina", "omar", "pia",
    "quinn", "rosa", "sam", "tara", "uma", "victor", "wendy", "xena",
)
PARENT_NAMES = (
    "alpha", "beta", "gamma", "delta", "sigma", "omega", "kappa", "lambda",
    "theta", "zeta",
)
_NAME_WORDS = {"aliases": ["name", "names"], "synonyms": ["name", "names"]}
_ID_WORDS = {"aliases": ["id"], "synonyms": ["id"]}


def name_pool(base: Tuple[str, ...], count: int) -> List[str]:
    """At least `count` distinct single-word names"""
    names = list(base)
    suffix = 2
    while len(names) < count:
        names.extend(f"{n}{suffix}" for n in base)
        suffix += 1
    return names[:max(count, len(base))]


def build_schema(family: Family, heldout: bool, lexicon_shift: float) -> Schema:
    """Schema and lexicon of one family"""
    parent, child = family.parent, family.child
    tables = {
        parent: [Column("id", INT), Column("name", TEXT),
                 Column(family.p_num, INT), Column(family.p_cat, TEXT)],
        child: [Column("id", INT), Column("name", TEXT),
                Column(family.c_num1, INT), Column(family.c_num2, INT),
                Column(family.c_cat, TEXT), Column(family.fk_column, INT)],
    }
    lexicon: Dict[str, Dict[str, List[str]]] = {}
    for table in (parent, child):
        words = TABLES[table]
        lexicon[table] = {"aliases": list(words.aliases), "synonyms": list(words.synonyms)}
        for col in tables[table]:
            key = f"{table}.{col.name}"
            if col.name == "name":
                lexicon[key] = dict(_NAME_WORDS)
            elif col.name in ("id", family.fk_column):
                lexicon[key] = dict(_ID_WORDS)
            else:
                concept = CONCEPTS[col.name]
                lexicon[key] = {"aliases": list(concept.aliases), "synonyms": list(concept.synonyms)}
    return Schema(
        schema_id=family.schema_id,
        tables=tables,
        foreign_keys=[(f"{child}.{family.fk_column}", f"{parent}.id")],
        lexicon=lexicon,
        heldout=heldout,
        lexicon_shift=lexicon_shift,
    )
