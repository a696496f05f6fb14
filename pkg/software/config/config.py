import logging
import logging.config
import os

from pyhocon import ConfigFactory

from experiment_spec import ExperimentSpec
from pkm_errors import ConfigurationError

LOGGING_CONF = "logging.conf"


def resource_file_path(filename):
    """ Search for filename in the list of directories specified in the
        PYTHONPATH environment variable.
        Taken from https://stackoverflow.com/questions/45806838/can-i-locate-resource-file-in-pythonpath
    """
    if os.path.isabs(filename):
        if os.path.exists(filename):
            return filename
        raise ConfigurationError(f"File not found: {filename}")

    pythonpath = os.environ.get("PYTHONPATH")
    if pythonpath is None:
        directories = ['.']
    else:
        directories = pythonpath.split(os.pathsep) + ['.']

    for d in directories:
        filepath = os.path.join(d, filename)
        if os.path.exists(filepath):
            return filepath

    logging.getLogger("Config").debug("Tried the following directories: %s", directories)
    raise ConfigurationError(f"File not found: {filename}")


def load_config(config_file_name):
    file_path = resource_file_path(config_file_name)
    try:
        config = ConfigFactory.parse_file(file_path)
    except Exception as e:
        raise ConfigurationError(f"Cannot parse {file_path}: {e}") from e
    return config


def config_logger(logger_conf_file=LOGGING_CONF):
    logging.config.fileConfig(resource_file_path(logger_conf_file), disable_existing_loggers=False)


def load_run_config(path):
    """Parse a JSON (or HOCON) run config into an ExperimentSpec; unknown
    fields and invalid values raise ConfigurationError."""
    if not os.path.exists(path):
        raise ConfigurationError(f"config not found: {path}")
    document = load_config(path).as_plain_ordered_dict()
    return ExperimentSpec.from_dict(_plain(document))


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_plain(v) for v in value]
    return value
