from django.urls import path, re_path

from . import views

app_name = "memoryApp"

USER = r"(?P<user_id>[A-Za-z0-9][A-Za-z0-9_.@-]{0,127})"

urlpatterns = [
    # API
    re_path(rf"^v1/users/{USER}/messages$", views.append_message, name="messages"),
    re_path(rf"^v1/users/{USER}/flush$", views.flush_session, name="flush"),
    re_path(rf"^v1/users/{USER}/search$", views.search, name="search"),
    re_path(rf"^v1/users/{USER}/answer$", views.answer, name="answer"),
    re_path(rf"^v1/users/{USER}/episodes$", views.episodes, name="episodes"),
    re_path(rf"^v1/users/{USER}/facts$", views.facts, name="facts"),
    path("v1/admin/drain", views.drain, name="drain"),
]
