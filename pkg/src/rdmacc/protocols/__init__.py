from .calvin import Calvin
from .mvcc import MVCC
from .occ import OCC
from .sundial import Sundial
from .twopl import NoWait, WaitDie

PROTOCOLS = {
    "nowait": NoWait,
    "waitdie": WaitDie,
    "occ": OCC,
    "mvcc": MVCC,
    "sundial": Sundial,
    "calvin": Calvin,
}
