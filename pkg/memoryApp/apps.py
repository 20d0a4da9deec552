from django.apps import AppConfig


class MemoryappConfig(AppConfig):
    name = "memoryApp"
    verbose_name = "Conversational memory"
