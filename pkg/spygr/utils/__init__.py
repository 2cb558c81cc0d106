# Utils package exports
from .json_utils import (
    to_jsonable,
    dumps_canonical,
    load_json_file,
    save_json_file,
)
from .config_loader import (
    load_environment,
    get_thread_count,
    load_config_file,
    resolve_config,
    parse_int_list,
)
from .stage_base import (
    StageBase,
    StageOutcome,
    RunManifest,
    EXIT_OK,
    EXIT_FAILURE,
    EXIT_CONFIG_ERROR,
)
