"""Array, image and logging helpers."""
