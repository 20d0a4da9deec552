"""Prompt rendering. Every prompt is a pair of Django templates under
``templates/memoryApp/prompts/``: ``<name>_system.txt`` and ``<name>_user.txt``.
"""
from pathlib import Path

from django.template import Context, Template
from django.template.loader import render_to_string

PROMPT_DIR = "memoryApp/prompts"


def render_prompt(name, **context):
    """Renders the system and user prompts of a pipeline function.

    Args:
        name (str): prompt name, e.g. "boundary_detector"
        **context: template variables

    Returns:
        tuple: (system_prompt, user_prompt), both stripped
    """
    system_prompt = render_to_string(f"{PROMPT_DIR}/{name}_system.txt", context)
    user_prompt = render_to_string(f"{PROMPT_DIR}/{name}_user.txt", context)
    return system_prompt.strip(), user_prompt.strip()


def render_template_file(path, **context):
    """Renders an external template file (e.g. a replacement judge prompt)"""
    template = Template(Path(path).read_text(encoding="utf-8"))
    return template.render(Context(context, autoescape=False)).strip()
