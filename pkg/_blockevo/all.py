# noinspection PyUnresolvedReferences
from _blockevo.utils import *

# noinspection PyUnresolvedReferences
from _blockevo.arch import *

# noinspection PyUnresolvedReferences
from _blockevo.pso import *

# noinspection PyUnresolvedReferences
from _blockevo.surrogate import *

# noinspection PyUnresolvedReferences
from _blockevo.nn import *

# noinspection PyUnresolvedReferences
from _blockevo.data import *

# noinspection PyUnresolvedReferences
from _blockevo.search import *

# noinspection PyUnresolvedReferences
from _blockevo.config import *

# noinspection PyUnresolvedReferences
from _blockevo.report import *
