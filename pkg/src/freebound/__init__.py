"""Early-exercise boundary of American basket puts by front fixing and boundary integral iteration."""
__version__ = "0.1.0"
