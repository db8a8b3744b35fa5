"""CLI commands, one module each; app.py dispatches through COMMANDS."""
from commands import ablate, evaluate, extract_mesh, gen_scene, render, train

COMMANDS = {
    "gen-scene": gen_scene,
    "train": train,
    "render": render,
    "extract-mesh": extract_mesh,
    "eval": evaluate,
    "ablate": ablate,
}
