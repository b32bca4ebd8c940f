import os
import time

from importlib_resources import files

RESULTS_ENV = 'VITI_RESULTS_DIR'
DATA_ENV = 'VITI_DATA_DIR'


def default_config_path():
    return str(files('viti.data').joinpath('default_config.yaml'))


def make_directory(folder):
    if not os.path.exists(folder):
        os.makedirs(folder)


def results_root(results_folder=None):
    """Results root: explicit folder, else $VITI_RESULTS_DIR, else ./results."""
    if results_folder is None:
        results_folder = os.environ.get(RESULTS_ENV, os.getcwd() + os.sep + 'results')
    return str(results_folder)


def resolve_data_path(path, data_folder=None):
    """Relative dataset paths are resolved against data_folder, else $VITI_DATA_DIR."""
    path = str(path)
    root = data_folder if data_folder is not None else os.environ.get(DATA_ENV)
    if root is not None and not os.path.isabs(path):
        return root + os.sep + path
    return path


def new_run_folder(results_folder=None, prefix='run'):
    """Create results/<prefix>_<mmddYYYY>_<NNNN>, numbering past existing folders."""
    root = results_root(results_folder)
    make_directory(root)

    date_str = time.strftime('%m%d%Y', time.localtime())
    num = 0
    save_folder = root + os.sep + prefix + '_' + date_str + '_' + str(num).zfill(4)
    while os.path.exists(save_folder):
        num += 1
        save_folder = root + os.sep + prefix + '_' + date_str + '_' + str(num).zfill(4)
    os.mkdir(save_folder)
    return save_folder
