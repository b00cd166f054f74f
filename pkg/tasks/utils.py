import shlex
from pathlib import Path

from invoke import Context, UnexpectedExit

TASKS_DIR = Path(__file__).parent
REPO_BASE = TASKS_DIR.parent


def check_if_command_available(context: Context, command_name: str) -> bool:
    try:
        context.run(f"command -v {shlex.quote(command_name)}", hide=True)
    except UnexpectedExit:
        return False
    return True


# quoted for use inside `cd`
ESCAPED_REPO_PATH = shlex.quote(str(REPO_BASE))
