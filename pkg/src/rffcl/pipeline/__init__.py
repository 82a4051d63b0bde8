"""
Experiment pipeline: run configuration, packet datasets and the command phases
"""
from .commands import Workspace, inspect_path, run_eval, run_finetune, run_gen, run_pretrain
from .config import RunConfig, from_dict, load_config
from .datasets import PacketDataset, generate_dataset, read_dataset, write_dataset

__all__ = [
    "PacketDataset",
    "RunConfig",
    "Workspace",
    "from_dict",
    "generate_dataset",
    "inspect_path",
    "load_config",
    "read_dataset",
    "run_eval",
    "run_finetune",
    "run_gen",
    "run_pretrain",
    "write_dataset",
]
