from importlib.metadata import version

try:
    __version__ = version("subnetra")
except:  # NOQA: E722
    __version__ = "0.0.0"
