name = "sgquant"
__version__ = "1.0.0"
__author__ = "The sgquant developers"
__email__ = "sgquant-dev@users.noreply.github.com"
__license__ = "2-Clause BSD"
