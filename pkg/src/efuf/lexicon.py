"""Object-category lexicon: surface forms mapped to canonical categories.

The bundled table covers the 80 MSCOCO categories with the standard synonym
list plus mechanically derived plural forms. File format (tab-separated):
one canonical category per line, synonyms comma-separated after a tab.

Regenerate the bundled file with ``python -m efuf.lexicon <path>``.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

# Standard MSCOCO category/synonym table (80 categories, first entry per
# line is the canonical category).
_COCO_SYNONYMS = """\
person, girl, boy, man, woman, kid, child, chef, baker, people, adult, rider, children, baby, worker, passenger, sister, biker, policeman, cop, officer, lady, cowboy, bride, groom, male, female, guy, traveler, mother, father, gentleman, pitcher, player, skier, snowboarder, skater, skateboarder, foreigner, caller, offender, coworker, trespasser, patient, politician, soldier, grandchild, serviceman, walker, drinker, doctor, bicyclist, thief, buyer, teenager, student, camper, driver, solider, hunter, shopper, villager
bicycle, bike, unicycle, minibike, trike
car, automobile, van, minivan, sedan, suv, hatchback, cab, jeep, coupe, taxicab, limo, taxi
motorcycle, scooter, motor bike, motor cycle, motorbike, moped
airplane, jetliner, plane, air plane, monoplane, aircraft, jet, airbus, biplane, seaplane
bus, minibus, trolley
train, locomotive, tramway, caboose
truck, pickup, lorry, hauler, firetruck
boat, ship, liner, sailboat, motorboat, dinghy, powerboat, speedboat, canoe, skiff, yacht, kayak, catamaran, pontoon, houseboat, vessel, rowboat, trawler, ferryboat, watercraft, tugboat, schooner, barge, ferry, sailboard, paddleboat, lifeboat, freighter, steamboat, riverboat, battleship, steamship
traffic light, street light, traffic signal, stop light, streetlight, stoplight
fire hydrant, hydrant
stop sign
parking meter
bench, pew
bird, ostrich, owl, seagull, goose, duck, parakeet, falcon, robin, pelican, waterfowl, heron, hummingbird, mallard, finch, pigeon, sparrow, seabird, osprey, blackbird, fowl, shorebird, woodpecker, egret, chickadee, quail, bluebird, kingfisher, buzzard, willet, gull, swan, bluejay, flamingo, cormorant, parrot, loon, gosling, waterbird, pheasant, rooster, sandpiper, crow, raven, turkey, oriole, cowbird, warbler, magpie, peacock, cockatiel, lorikeet, puffin, vulture, condor, macaw, peafowl, cockatoo, songbird
cat, kitten, feline, tabby
dog, puppy, beagle, pup, chihuahua, schnauzer, dachshund, rottweiler, canine, pitbull, collie, pug, terrier, poodle, labrador, doggie, doberman, mutt, doggy, spaniel, bulldog, sheepdog, weimaraner, corgi, cocker, greyhound, retriever, brindle, hound, whippet, husky
horse, colt, pony, racehorse, stallion, equine, mare, foal, palomino, mustang, clydesdale, bronc, bronco
sheep, lamb, ram, goat, ewe
cow, cattle, oxen, ox, calf, holstein, heifer, buffalo, bull, zebu, bison
elephant
bear, panda
zebra
giraffe
backpack, knapsack
umbrella
handbag, wallet, purse, briefcase
tie, bow, bow tie
suitcase, suit case, luggage
frisbee
skis, ski
snowboard
sports ball, ball
kite
baseball bat
baseball glove
skateboard
surfboard, longboard, skimboard, shortboard, wakeboard
tennis racket, racket
bottle
wine glass
cup
fork
knife, pocketknife, knive
spoon
bowl, container
banana
apple
sandwich, burger, sub, cheeseburger, hamburger
orange
broccoli
carrot
hot dog
pizza
donut, doughnut, bagel
cake, cheesecake, cupcake, shortcake, coffeecake, pancake
chair, seat, stool
couch, sofa, recliner, futon, loveseat, settee, chesterfield
potted plant, houseplant
bed
dining table, table, desk
toilet, urinal, commode, lavatory, potty
tv, monitor, televison, television
laptop, computer, notebook, netbook, lenovo, macbook, laptop computer
mouse
remote
keyboard
cell phone, mobile phone, phone, cellphone, telephone, phon, smartphone, iphone
microwave
oven, stovetop, stove, stove top oven
toaster
sink
refrigerator, fridge, freezer
book
clock
vase
scissors
teddy bear, teddybear
hair drier, hairdryer
toothbrush
"""

_IRREGULAR_PLURALS = {
    "person": "people",
    "child": "children",
    "goose": "geese",
    "mouse": "mice",
    "sheep": "sheep",
    "ox": "oxen",
    "knife": "knives",
    "thief": "thieves",
    "calf": "calves",
    "wolf": "wolves",
    "foot": "feet",
}


def pluralize(surface: str) -> str:
    """Naive English plural of a surface form (applied to its last word)."""
    head, _, last = surface.rpartition(" ")
    if last in _IRREGULAR_PLURALS:
        plural = _IRREGULAR_PLURALS[last]
    elif last.endswith("man"):
        plural = last[:-3] + "men"
    elif last.endswith(("s", "x", "z", "ch", "sh")):
        plural = last + "es"
    elif last.endswith("y") and len(last) > 1 and last[-2] not in "aeiou":
        plural = last[:-1] + "ies"
    else:
        plural = last + "s"
    return f"{head} {plural}" if head else plural


class Lexicon:
    """Maps lowercase surface forms (incl. multi-word) to canonical categories."""

    def __init__(self, entries: dict[str, list[str]]):
        # entries: canonical -> surface forms (canonical itself need not repeat)
        self.entries = {canon: list(surfs) for canon, surfs in entries.items()}
        self.surface_to_canonical: dict[str, str] = {}
        for canon, surfs in self.entries.items():
            self.surface_to_canonical.setdefault(canon.lower(), canon)
            for s in surfs:
                self.surface_to_canonical.setdefault(s.lower(), canon)
        self.max_words = max((s.count(" ") + 1 for s in self.surface_to_canonical), default=1)

    def canonical(self, surface: str) -> str | None:
        return self.surface_to_canonical.get(surface.lower().strip())

    def categories(self) -> list[str]:
        return list(self.entries)

    def save(self, path: Path | str) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for canon, surfs in self.entries.items():
                f.write(f"{canon}\t{', '.join(surfs)}\n")

    @classmethod
    def load(cls, path: Path | str) -> "Lexicon":
        entries: dict[str, list[str]] = {}
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                canon, _, rest = line.partition("\t")
                surfs = [s.strip() for s in rest.split(",") if s.strip()]
                entries[canon.strip()] = surfs
        return cls(entries)

    @classmethod
    def bundled(cls) -> "Lexicon":
        """The COCO lexicon shipped as package data."""
        with resources.as_file(resources.files("efuf").joinpath("data/coco_lexicon.tsv")) as p:
            return cls.load(p)


def build_coco_lexicon() -> Lexicon:
    """Build the COCO lexicon from the synonym table plus plural forms."""
    entries: dict[str, list[str]] = {}
    for line in _COCO_SYNONYMS.strip().splitlines():
        forms = [s.strip() for s in line.split(",") if s.strip()]
        canon, synonyms = forms[0], forms[1:]
        surfaces: list[str] = []
        for form in forms:
            for variant in (form, pluralize(form)):
                if variant != canon and variant not in surfaces:
                    surfaces.append(variant)
        entries[canon] = surfaces
    return Lexicon(entries)


if __name__ == "__main__":
    import sys

    out = sys.argv[1] if len(sys.argv) > 1 else "coco_lexicon.tsv"
    build_coco_lexicon().save(out)
    print(f"wrote {out}")
