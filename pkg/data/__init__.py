"""On-disk formats: images, PLY meshes, checkpoints and datasets."""
