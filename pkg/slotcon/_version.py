from pkg_resources import DistributionNotFound, get_distribution

try:
    __version__ = get_distribution("slotcon").version
except DistributionNotFound:
    __version__ = "0.0.0"
