from pathlib import Path

from invoke import Context, task

from .utils import ESCAPED_REPO_PATH

NAMESPACE = "TRUSTPREF"
CURRENT_DIRECTORY = Path(__file__).parent.resolve()
MAIN_DIRECTORY = CURRENT_DIRECTORY.parent
PYTHON_TARGETS = "trustpref tests tasks"


@task(name="lint")
def lint_all(context: Context) -> None:
    """Run ruff, pylint, mypy and yamllint."""

    lint_ruff(context)
    lint_pylint(context)
    lint_mypy(context)
    lint_yaml(context)

    print(f" - [{NAMESPACE}] All linters have been executed!")


@task(name="format")
def format_all(context: Context) -> None:
    format_ruff(context)

    print(f" - [{NAMESPACE}] All formatters have been executed!")


# ----------------------------------------------------------------------------
# Linter tasks - Python
# ----------------------------------------------------------------------------
@task
def lint_pylint(context: Context) -> None:
    print(f" - [{NAMESPACE}] Check code with pylint")
    with context.cd(ESCAPED_REPO_PATH):
        context.run("pylint trustpref")


@task
def lint_mypy(context: Context) -> None:
    print(f" - [{NAMESPACE}] Check types with mypy")
    with context.cd(ESCAPED_REPO_PATH):
        context.run("mypy trustpref")


@task
def lint_ruff(context: Context) -> None:
    print(f" - [{NAMESPACE}] Check code with ruff")
    exec_cmd = f"ruff format --check --diff {PYTHON_TARGETS} && "
    exec_cmd += f"ruff check --diff {PYTHON_TARGETS}"
    with context.cd(ESCAPED_REPO_PATH):
        context.run(exec_cmd)


# ----------------------------------------------------------------------------
# Linter tasks - Yaml
# ----------------------------------------------------------------------------


@task
def lint_yaml(context: Context) -> None:
    """Validate the example configurations with yamllint."""

    print(f" - [{NAMESPACE}] Check yaml with yamllint")
    with context.cd(ESCAPED_REPO_PATH):
        context.run("yamllint configs", pty=True)


# ----------------------------------------------------------------------------
# Formatting tasks - Python
# ----------------------------------------------------------------------------
@task
def format_ruff(context: Context) -> None:
    print(f" - [{NAMESPACE}] Format code with ruff")
    exec_cmd = f"ruff format {PYTHON_TARGETS} && "
    exec_cmd += f"ruff check --fix {PYTHON_TARGETS}"
    with context.cd(ESCAPED_REPO_PATH):
        context.run(exec_cmd)
